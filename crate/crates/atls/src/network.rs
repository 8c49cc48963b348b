//! Small classifier graphs that can run digitally or on analog tiles.
//!
//! A model is an ordered list of layers ending in exactly one softmax head.
//! Linear layers (including the attention projections and the head) are
//! backed either by a plain matrix or by an [`AnalogTile`]; biases always
//! stay digital. Conversion to analog programs each digital weight matrix
//! onto a freshly sampled tile exactly once, optionally perturbed by
//! programming noise scaled to that layer's weight spread.

use crate::error::{AtlsError, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_key, StreamRng};
use crate::tile::{AnalogTile, TileConfig};
use sha2::{Digest, Sha256};

/// Fraction of the device window that analog conversion may fill when it
/// has to rescale a layer. See [`ModelGraph::convert_to_analog`].
pub const PROGRAM_HEADROOM: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
pub enum Backing {
    Digital(Matrix),
    Analog(AnalogTile),
}

/// Linear map plus digital bias, with per-batch caches of the sample
/// inputs and output errors that trainers consume.
///
/// Analog backings carry a digital `out_scale`: programming maps weights
/// into the device window as `w / out_scale` and the periphery multiplies
/// tile outputs back up, so tiles hold device-unit values while the layer
/// behaves like the full-range matrix. Cached deltas are divided by the
/// scale, which cancels it from trainer update steps; trainers never see
/// the mapping.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    backing: Backing,
    out_scale: f64,
    bias: Vec<f64>,
    cached_input: Vec<Vec<f64>>,
    cached_delta: Vec<Vec<f64>>,
    grad_w: Matrix,
    grad_b: Vec<f64>,
}

impl LinearLayer {
    pub fn digital(weights: Matrix, bias: Vec<f64>) -> Self {
        assert_eq!(bias.len(), weights.rows());
        let (r, c) = (weights.rows(), weights.cols());
        LinearLayer {
            backing: Backing::Digital(weights),
            out_scale: 1.0,
            bias,
            cached_input: Vec::new(),
            cached_delta: Vec::new(),
            grad_w: Matrix::zeros(r, c),
            grad_b: vec![0.0; r],
        }
    }

    pub fn analog(tile: AnalogTile, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != tile.rows() {
            return Err(AtlsError::invalid(format!(
                "bias length {} does not match {} tile rows",
                bias.len(),
                tile.rows()
            )));
        }
        let (r, c) = (tile.rows(), tile.cols());
        Ok(LinearLayer {
            backing: Backing::Analog(tile),
            out_scale: 1.0,
            bias,
            cached_input: Vec::new(),
            cached_delta: Vec::new(),
            grad_w: Matrix::zeros(r, c),
            grad_b: vec![0.0; r],
        })
    }

    fn glorot(out_dim: usize, in_dim: usize, rng: &mut StreamRng) -> Self {
        let a = (6.0 / (out_dim + in_dim) as f64).sqrt();
        let w = Matrix::from_fn(out_dim, in_dim, |_, _| (2.0 * rng.uniform() - 1.0) * a);
        LinearLayer::digital(w, vec![0.0; out_dim])
    }

    pub fn out_dim(&self) -> usize {
        match &self.backing {
            Backing::Digital(w) => w.rows(),
            Backing::Analog(t) => t.rows(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match &self.backing {
            Backing::Digital(w) => w.cols(),
            Backing::Analog(t) => t.cols(),
        }
    }

    pub fn is_analog(&self) -> bool {
        matches!(self.backing, Backing::Analog(_))
    }

    pub fn backing(&self) -> &Backing {
        &self.backing
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn tile_mut(&mut self) -> Option<&mut AnalogTile> {
        match &mut self.backing {
            Backing::Analog(t) => Some(t),
            Backing::Digital(_) => None,
        }
    }

    /// Digital factor multiplying tile outputs; 1 for digital backings and
    /// for analog weights that fit the device window unscaled.
    pub fn out_scale(&self) -> f64 {
        self.out_scale
    }

    pub(crate) fn set_out_scale(&mut self, scale: f64) {
        assert!(scale.is_finite() && scale > 0.0, "output scale must be positive");
        self.out_scale = scale;
    }

    /// Effective weight matrix as plain numbers: the digital matrix, or a
    /// clean tile read times the output scale.
    pub fn weights_snapshot(&mut self) -> Matrix {
        match &mut self.backing {
            Backing::Digital(w) => w.clone(),
            Backing::Analog(t) => {
                let mut w = t.read_weights(false);
                if self.out_scale != 1.0 {
                    for v in w.data_mut() {
                        *v *= self.out_scale;
                    }
                }
                w
            }
        }
    }

    /// Same values as a noise-free `weights_snapshot`, but without touching
    /// the tile stream, so serialization never perturbs reproducibility.
    pub fn weights_clean(&self) -> Matrix {
        match &self.backing {
            Backing::Digital(w) => w.clone(),
            Backing::Analog(t) => {
                let mut w = t.clean_weights();
                if self.out_scale != 1.0 {
                    for v in w.data_mut() {
                        *v *= self.out_scale;
                    }
                }
                w
            }
        }
    }

    /// Cached (input, delta) pairs from the last backward pass, one per
    /// sample application.
    pub fn update_pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.cached_input
            .iter()
            .zip(&self.cached_delta)
            .map(|(x, d)| (x.as_slice(), d.as_slice()))
    }

    pub fn grad_w(&self) -> &Matrix {
        &self.grad_w
    }

    pub fn grad_b(&self) -> &[f64] {
        &self.grad_b
    }

    /// SGD on the digital weights and bias. Analog backings only get their
    /// bias moved; the tile is the trainer's job.
    pub fn apply_digital_sgd(&mut self, lr: f64) {
        if let Backing::Digital(w) = &mut self.backing {
            w.add_scaled(-lr, &self.grad_w);
        }
        for (b, g) in self.bias.iter_mut().zip(&self.grad_b) {
            *b -= lr * g;
        }
    }

    fn begin_batch(&mut self) {
        self.cached_input.clear();
        self.cached_delta.clear();
        self.grad_w.fill(0.0);
        self.grad_b.fill(0.0);
    }

    fn forward_vec(&mut self, x: &[f64], train: bool) -> Vec<f64> {
        let mut y = match &mut self.backing {
            Backing::Digital(w) => w.matvec(x),
            Backing::Analog(t) => t.forward(x, true),
        };
        if self.out_scale != 1.0 {
            for yi in y.iter_mut() {
                *yi *= self.out_scale;
            }
        }
        for (yi, b) in y.iter_mut().zip(&self.bias) {
            *yi += b;
        }
        if train {
            self.cached_input.push(x.to_vec());
        }
        y
    }

    fn backward_vec(&mut self, delta: &[f64]) -> Vec<f64> {
        let k = self.cached_delta.len();
        let x = &self.cached_input[k];
        for (g, d) in self.grad_b.iter_mut().zip(delta) {
            *g += d;
        }
        if matches!(self.backing, Backing::Digital(_)) {
            self.grad_w.add_outer(1.0, delta, x);
        }
        let mut dx = match &mut self.backing {
            Backing::Digital(w) => w.matvec_t(delta),
            Backing::Analog(t) => t.backward(delta, true),
        };
        // The effective map is out_scale * W_dev, so dx chain-rules through
        // the factor. The cached delta is divided by it instead: a trainer
        // stepping the tile from (input, delta) pairs then moves the
        // effective weights exactly as it would a digital layer, rather
        // than amplifying the per-layer learning rate by scale squared.
        if self.out_scale != 1.0 {
            for v in dx.iter_mut() {
                *v *= self.out_scale;
            }
            self.cached_delta
                .push(delta.iter().map(|d| d / self.out_scale).collect());
        } else {
            self.cached_delta.push(delta.to_vec());
        }
        dx
    }
}

#[derive(Debug, Clone, Default)]
struct AttnCache {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Softmax rows per head: probs[h][t][u].
    probs: Vec<Vec<Vec<f64>>>,
}

/// One multi-head self-attention block over a fixed-length token sequence,
/// operating on the flattened (seq_len * embed_dim) vector. Softmax and
/// score arithmetic are digital; the four projections are linear layers
/// that can be converted to analog tiles.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    q: LinearLayer,
    k: LinearLayer,
    v: LinearLayer,
    proj: LinearLayer,
    head_count: usize,
    seq_len: usize,
    embed_dim: usize,
    caches: Vec<AttnCache>,
    cursor: usize,
}

impl AttentionBlock {
    pub fn new(
        q: LinearLayer,
        k: LinearLayer,
        v: LinearLayer,
        proj: LinearLayer,
        head_count: usize,
        seq_len: usize,
    ) -> Result<Self> {
        let embed_dim = q.in_dim();
        for (name, l) in [("q", &q), ("k", &k), ("v", &v), ("proj", &proj)] {
            if l.in_dim() != embed_dim || l.out_dim() != embed_dim {
                return Err(AtlsError::invalid(format!(
                    "attention {name} projection must be {embed_dim}x{embed_dim}"
                )));
            }
        }
        if head_count == 0 || embed_dim % head_count != 0 {
            return Err(AtlsError::invalid(format!(
                "head count {head_count} must divide embedding dim {embed_dim}"
            )));
        }
        if seq_len == 0 {
            return Err(AtlsError::invalid("attention needs at least one token"));
        }
        Ok(AttentionBlock {
            q,
            k,
            v,
            proj,
            head_count,
            seq_len,
            embed_dim,
            caches: Vec::new(),
            cursor: 0,
        })
    }

    pub fn head_count(&self) -> usize {
        self.head_count
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn projections(&self) -> [&LinearLayer; 4] {
        [&self.q, &self.k, &self.v, &self.proj]
    }

    fn dim(&self) -> usize {
        self.seq_len * self.embed_dim
    }

    fn begin_batch(&mut self) {
        self.caches.clear();
        self.cursor = 0;
        for l in [&mut self.q, &mut self.k, &mut self.v, &mut self.proj] {
            l.begin_batch();
        }
    }

    fn forward_sample(&mut self, x: &[f64], train: bool) -> Vec<f64> {
        let (s, e, h) = (self.seq_len, self.embed_dim, self.head_count);
        let dh = e / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let token = |t: usize| &x[t * e..(t + 1) * e];
        let q: Vec<Vec<f64>> = (0..s).map(|t| self.q.forward_vec(token(t), train)).collect();
        let k: Vec<Vec<f64>> = (0..s).map(|t| self.k.forward_vec(token(t), train)).collect();
        let v: Vec<Vec<f64>> = (0..s).map(|t| self.v.forward_vec(token(t), train)).collect();

        let mut probs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(h);
        let mut att = vec![vec![0.0; e]; s];
        for head in 0..h {
            let lo = head * dh;
            let hi = lo + dh;
            let mut head_probs = Vec::with_capacity(s);
            for t in 0..s {
                let mut scores = vec![0.0; s];
                for (u, score) in scores.iter_mut().enumerate() {
                    let dot: f64 = q[t][lo..hi]
                        .iter()
                        .zip(&k[u][lo..hi])
                        .map(|(a, b)| a * b)
                        .sum();
                    *score = dot * scale;
                }
                let p = softmax(&scores);
                for u in 0..s {
                    for d in lo..hi {
                        att[t][d] += p[u] * v[u][d];
                    }
                }
                head_probs.push(p);
            }
            probs.push(head_probs);
        }

        let mut out = Vec::with_capacity(s * e);
        for row in &att {
            out.extend(self.proj.forward_vec(row, train));
        }
        if train {
            self.caches.push(AttnCache { q, k, v, probs });
        }
        out
    }

    fn backward_sample(&mut self, dout: &[f64]) -> Vec<f64> {
        let (s, e, h) = (self.seq_len, self.embed_dim, self.head_count);
        let dh = e / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let cache = std::mem::take(&mut self.caches[self.cursor]);
        self.cursor += 1;

        let datt: Vec<Vec<f64>> = (0..s)
            .map(|t| self.proj.backward_vec(&dout[t * e..(t + 1) * e]))
            .collect();

        let mut dq = vec![vec![0.0; e]; s];
        let mut dk = vec![vec![0.0; e]; s];
        let mut dv = vec![vec![0.0; e]; s];
        for head in 0..h {
            let lo = head * dh;
            let hi = lo + dh;
            for t in 0..s {
                let p = &cache.probs[head][t];
                // dp_u = datt_t . v_u on this head slice
                let mut dp = vec![0.0; s];
                for u in 0..s {
                    let mut acc = 0.0;
                    for d in lo..hi {
                        acc += datt[t][d] * cache.v[u][d];
                        dv[u][d] += p[u] * datt[t][d];
                    }
                    dp[u] = acc;
                }
                // softmax jacobian: ds_u = p_u (dp_u - sum_r p_r dp_r)
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for u in 0..s {
                    let ds = p[u] * (dp[u] - dot) * scale;
                    for d in lo..hi {
                        dq[t][d] += ds * cache.k[u][d];
                        dk[u][d] += ds * cache.q[t][d];
                    }
                }
            }
        }

        let mut dx = vec![0.0; s * e];
        for t in 0..s {
            let gq = self.q.backward_vec(&dq[t]);
            let gk = self.k.backward_vec(&dk[t]);
            let gv = self.v.backward_vec(&dv[t]);
            for d in 0..e {
                dx[t * e + d] = gq[d] + gk[d] + gv[d];
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(LinearLayer),
    Activation(ActKind),
    Attention(AttentionBlock),
    /// Average `groups` equal slices of the input; the token pooling step.
    MeanPool { groups: usize },
    SoftmaxHead(LinearLayer),
}

impl Layer {
    /// The linear layer inside plain linear and head layers; `None` for the
    /// rest (attention owns four, reachable via its projections).
    pub fn as_linear(&self) -> Option<&LinearLayer> {
        match self {
            Layer::Linear(l) | Layer::SoftmaxHead(l) => Some(l),
            _ => None,
        }
    }
}

/// Per-layer activation caches used by the activation backward pass.
#[derive(Debug, Clone, Default)]
struct ActCache {
    inputs: Vec<Vec<f64>>,
    cursor: usize,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    layers: Vec<Layer>,
    act_caches: Vec<ActCache>,
}

impl ModelGraph {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let heads = layers
            .iter()
            .filter(|l| matches!(l, Layer::SoftmaxHead(_)))
            .count();
        if heads != 1 || !matches!(layers.last(), Some(Layer::SoftmaxHead(_))) {
            return Err(AtlsError::invalid(
                "a model needs exactly one softmax head, in final position",
            ));
        }
        let n = layers.len();
        let model = ModelGraph {
            layers,
            act_caches: vec![ActCache::default(); n],
        };
        model.validate_dims()?;
        Ok(model)
    }

    fn validate_dims(&self) -> Result<()> {
        let mut dim = self.in_dim();
        for (idx, layer) in self.layers.iter().enumerate() {
            dim = match layer {
                Layer::Linear(l) | Layer::SoftmaxHead(l) => {
                    if l.in_dim() != dim {
                        return Err(AtlsError::invalid(format!(
                            "layer {idx} expects input {}, got {dim}",
                            l.in_dim()
                        )));
                    }
                    l.out_dim()
                }
                Layer::Activation(_) => dim,
                Layer::Attention(a) => {
                    if a.dim() != dim {
                        return Err(AtlsError::invalid(format!(
                            "layer {idx} expects {} token values, got {dim}",
                            a.dim()
                        )));
                    }
                    dim
                }
                Layer::MeanPool { groups } => {
                    if *groups == 0 || dim % groups != 0 {
                        return Err(AtlsError::invalid(format!(
                            "layer {idx}: cannot pool {dim} values into {groups} groups"
                        )));
                    }
                    dim / groups
                }
            };
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        // Walk to the first dimension-defining layer, undoing any pooling
        // that precedes it.
        let mut mult = 1;
        for l in &self.layers {
            match l {
                Layer::MeanPool { groups } => mult *= groups,
                Layer::Activation(_) => {}
                Layer::Linear(l) | Layer::SoftmaxHead(l) => return l.in_dim() * mult,
                Layer::Attention(a) => return a.dim() * mult,
            }
        }
        0
    }

    pub fn class_count(&self) -> usize {
        match self.layers.last() {
            Some(Layer::SoftmaxHead(l)) => l.out_dim(),
            _ => 0,
        }
    }

    pub fn is_fully_digital(&mut self) -> bool {
        let mut digital = true;
        self.for_each_linear_mut(&mut |_, l| digital &= !l.is_analog());
        digital
    }

    /// Visit every linear layer in graph order (attention projections in
    /// q, k, v, proj order; the head last), with a running index.
    pub fn for_each_linear_mut(&mut self, f: &mut impl FnMut(usize, &mut LinearLayer)) {
        let mut idx = 0;
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) | Layer::SoftmaxHead(l) => {
                    f(idx, l);
                    idx += 1;
                }
                Layer::Attention(a) => {
                    for l in [&mut a.q, &mut a.k, &mut a.v, &mut a.proj] {
                        f(idx, l);
                        idx += 1;
                    }
                }
                _ => {}
            }
        }
    }

    pub fn linear_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_linear_mut(&mut |_, _| n += 1);
        n
    }

    /// Forward a batch of rows; returns logits. `train` caches every
    /// intermediate needed for a following backward pass.
    pub fn forward_batch(&mut self, xs: &Matrix, train: bool) -> Matrix {
        if train {
            self.begin_batch();
        }
        let mut out = Matrix::zeros(xs.rows(), self.class_count());
        for s in 0..xs.rows() {
            let mut v = xs.row(s).to_vec();
            for (idx, layer) in self.layers.iter_mut().enumerate() {
                v = match layer {
                    Layer::Linear(l) | Layer::SoftmaxHead(l) => l.forward_vec(&v, train),
                    Layer::Activation(kind) => {
                        if train {
                            self.act_caches[idx].inputs.push(v.clone());
                        }
                        match kind {
                            ActKind::Relu => v.iter().map(|&x| x.max(0.0)).collect(),
                            ActKind::Tanh => v.iter().map(|&x| x.tanh()).collect(),
                        }
                    }
                    Layer::Attention(a) => a.forward_sample(&v, train),
                    Layer::MeanPool { groups } => {
                        let d = v.len() / *groups;
                        let mut y = vec![0.0; d];
                        for g in 0..*groups {
                            for i in 0..d {
                                y[i] += v[g * d + i];
                            }
                        }
                        let inv = 1.0 / *groups as f64;
                        y.iter_mut().for_each(|x| *x *= inv);
                        y
                    }
                };
            }
            out.row_mut(s).copy_from_slice(&v);
        }
        out
    }

    /// Backpropagate per-sample logit gradients cached by the last
    /// `forward_batch(.., train = true)`. Fills layer gradient buffers and
    /// (input, delta) pairs; does not change any parameter.
    pub fn backward_batch(&mut self, dlogits: &Matrix) {
        for s in 0..dlogits.rows() {
            let mut d = dlogits.row(s).to_vec();
            for idx in (0..self.layers.len()).rev() {
                let cache = &mut self.act_caches[idx];
                d = match &mut self.layers[idx] {
                    Layer::Linear(l) | Layer::SoftmaxHead(l) => l.backward_vec(&d),
                    Layer::Activation(kind) => {
                        let x = &cache.inputs[cache.cursor];
                        cache.cursor += 1;
                        match kind {
                            ActKind::Relu => d
                                .iter()
                                .zip(x)
                                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                                .collect(),
                            ActKind::Tanh => d
                                .iter()
                                .zip(x)
                                .map(|(g, &x)| {
                                    let t = x.tanh();
                                    g * (1.0 - t * t)
                                })
                                .collect(),
                        }
                    }
                    Layer::Attention(a) => a.backward_sample(&d),
                    Layer::MeanPool { groups } => {
                        let inv = 1.0 / *groups as f64;
                        let mut dx = Vec::with_capacity(d.len() * *groups);
                        for _ in 0..*groups {
                            dx.extend(d.iter().map(|g| g * inv));
                        }
                        dx
                    }
                };
            }
        }
    }

    fn begin_batch(&mut self) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            self.act_caches[idx].inputs.clear();
            self.act_caches[idx].cursor = 0;
            match layer {
                Layer::Linear(l) | Layer::SoftmaxHead(l) => l.begin_batch(),
                Layer::Attention(a) => a.begin_batch(),
                _ => {}
            }
        }
    }

    /// SHA-256 over shapes, weights, and biases of every linear layer in
    /// graph order, optionally skipping the head. Analog weights hash their
    /// clean read.
    pub fn param_hash(&mut self, include_head: bool) -> [u8; 32] {
        let head_idx = self.linear_count() - 1;
        let mut hasher = Sha256::new();
        self.for_each_linear_mut(&mut |idx, l| {
            if !include_head && idx == head_idx {
                return;
            }
            let w = l.weights_snapshot();
            hasher.update((w.rows() as u64).to_le_bytes());
            hasher.update((w.cols() as u64).to_le_bytes());
            for v in w.data() {
                hasher.update(v.to_le_bytes());
            }
            for b in l.bias() {
                hasher.update(b.to_le_bytes());
            }
        });
        hasher.finalize().into()
    }

    /// All digital parameters (weights row-major then bias, per linear in
    /// graph order). Used for gradient checking.
    pub fn digital_params(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_linear_mut(&mut |_, l| {
            if let Backing::Digital(w) = &l.backing {
                out.extend_from_slice(w.data());
                out.extend_from_slice(&l.bias);
            }
        });
        out
    }

    pub fn set_digital_params(&mut self, params: &[f64]) {
        let mut at = 0;
        self.for_each_linear_mut(&mut |_, l| {
            if let Backing::Digital(w) = &mut l.backing {
                let n = w.data().len();
                w.data_mut().copy_from_slice(&params[at..at + n]);
                at += n;
                let b = l.bias.len();
                l.bias.copy_from_slice(&params[at..at + b]);
                at += b;
            }
        });
        assert_eq!(at, params.len(), "parameter vector length mismatch");
    }

    /// Gradients in the same order as [`Self::digital_params`], from the
    /// buffers filled by the last backward pass.
    pub fn digital_grads(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_linear_mut(&mut |_, l| {
            if matches!(l.backing, Backing::Digital(_)) {
                out.extend_from_slice(l.grad_w.data());
                out.extend_from_slice(&l.grad_b);
            }
        });
        out
    }

    /// Swap the head for a freshly initialized one with `classes` outputs.
    /// Every non-head parameter is left bit-identical.
    pub fn replace_head(&mut self, classes: usize, seed: u64) -> Result<()> {
        if classes < 2 {
            return Err(AtlsError::invalid(format!(
                "a classifier head needs at least 2 classes, got {classes}"
            )));
        }
        let Some(Layer::SoftmaxHead(head)) = self.layers.last_mut() else {
            unreachable!("validated at construction");
        };
        if head.is_analog() {
            return Err(AtlsError::invalid(
                "head replacement must happen before analog conversion",
            ));
        }
        let mut rng = StreamRng::new(derive_key(&[seed, 0x68656164]));
        *head = LinearLayer::glorot(classes, head.in_dim(), &mut rng);
        Ok(())
    }

    /// Replace every digital weight matrix (hidden layers, attention
    /// projections, head) with an analog tile programmed from it in one
    /// shot. Layers whose weights poke out of the headroom window are
    /// divided by the smallest scale that fits them and the factor becomes
    /// the layer's digital output scale; weights already inside map one to
    /// one. `tau_rel` scales programming noise to each layer's standard
    /// deviation as programmed; biases stay digital.
    pub fn convert_to_analog(&mut self, cfg: &TileConfig, tau_rel: f64, seed: u64) -> Result<()> {
        if !self.is_fully_digital() {
            return Err(AtlsError::invalid(
                "model already has analog layers; conversion is one-shot",
            ));
        }
        if !(tau_rel.is_finite() && tau_rel >= 0.0) {
            return Err(AtlsError::invalid(format!(
                "programming noise factor must be >= 0, got {tau_rel}"
            )));
        }
        cfg.validate()?;
        let (b_hi, b_lo) = cfg.device.nominal_bounds()?;
        // Guaranteed positive by spec validation (both bounds straddle 0).
        // Scaled layers fill at most PROGRAM_HEADROOM of the window: a
        // weight parked on a soft bound has zero outward step size, so any
        // pulse activity would only walk it inward, decaying exactly the
        // largest weights. The margin keeps programmed values responsive
        // in both directions.
        let reach = b_hi.min(-b_lo) * PROGRAM_HEADROOM;
        let mut failure = None;
        self.for_each_linear_mut(&mut |idx, l| {
            if failure.is_some() {
                return;
            }
            let result = (|| -> Result<()> {
                let mut dev = l.weights_snapshot();
                let max_abs = dev.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let scale = if max_abs > reach { max_abs / reach } else { 1.0 };
                if scale != 1.0 {
                    for v in dev.data_mut() {
                        *v /= scale;
                    }
                }
                let tau = tau_rel * dev.std();
                let mut tile = AnalogTile::sample(
                    cfg,
                    dev.rows(),
                    dev.cols(),
                    derive_key(&[seed, idx as u64]),
                )?;
                tile.program_weights(&dev, tau)?;
                debug_assert_eq!(tile.program_count(), 1);
                l.backing = Backing::Analog(tile);
                l.set_out_scale(scale);
                Ok(())
            })();
            if let Err(e) = result {
                failure = Some(e);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Numerically safe softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Mean cross-entropy of a logit batch and its gradient
/// (softmax - one_hot) / batch, the input to `backward_batch`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(AtlsError::invalid(format!(
            "{} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let n = logits.rows();
    let classes = logits.cols();
    let mut grad = Matrix::zeros(n, classes);
    let mut loss = 0.0;
    for s in 0..n {
        let y = labels[s];
        if y >= classes {
            return Err(AtlsError::invalid(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        // No clamp: a zero or NaN probability must surface as a non-finite
        // loss so diverged runs are caught, not papered over.
        let p = softmax(logits.row(s));
        loss -= p[y].ln();
        let g = grad.row_mut(s);
        for c in 0..classes {
            g[c] = (p[c] - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Classification error (percent) and mean loss over a dataset.
pub fn evaluate(model: &mut ModelGraph, inputs: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
    let logits = model.forward_batch(inputs, false);
    let (loss, _) = cross_entropy(&logits, labels)?;
    let mut wrong = 0;
    for s in 0..logits.rows() {
        let row = logits.row(s);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred != labels[s] {
            wrong += 1;
        }
    }
    Ok((100.0 * wrong as f64 / logits.rows().max(1) as f64, loss))
}

/// Fully-connected classifier: dims = [input, hidden..., classes], ReLU
/// between layers, softmax head at the end.
pub fn build_mlp(dims: &[usize], seed: u64) -> Result<ModelGraph> {
    if dims.len() < 2 {
        return Err(AtlsError::invalid(
            "an MLP needs at least input and class dims",
        ));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(AtlsError::invalid("zero-sized layer in MLP dims"));
    }
    let mut rng = StreamRng::new(derive_key(&[seed, 0x6d6c70]));
    let mut layers = Vec::new();
    for w in 0..dims.len() - 1 {
        let lin = LinearLayer::glorot(dims[w + 1], dims[w], &mut rng);
        if w + 2 == dims.len() {
            layers.push(Layer::SoftmaxHead(lin));
        } else {
            layers.push(Layer::Linear(lin));
            layers.push(Layer::Activation(ActKind::Relu));
        }
    }
    ModelGraph::new(layers)
}

/// Tiny attention classifier: a dense patch embedding, one multi-head
/// self-attention block, a token-wise MLP sublayer, mean pooling over
/// tokens, and a softmax head.
pub fn build_attention_classifier(
    n_patches: usize,
    patch_dim: usize,
    embed_dim: usize,
    head_count: usize,
    mlp_hidden: usize,
    classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    if n_patches == 0 || patch_dim == 0 || embed_dim == 0 || mlp_hidden == 0 {
        return Err(AtlsError::invalid("attention classifier dims must be > 0"));
    }
    let mut rng = StreamRng::new(derive_key(&[seed, 0x61746e]));
    let embed = LinearLayer::glorot(n_patches * embed_dim, n_patches * patch_dim, &mut rng);
    let attn = AttentionBlock::new(
        LinearLayer::glorot(embed_dim, embed_dim, &mut rng),
        LinearLayer::glorot(embed_dim, embed_dim, &mut rng),
        LinearLayer::glorot(embed_dim, embed_dim, &mut rng),
        LinearLayer::glorot(embed_dim, embed_dim, &mut rng),
        head_count,
        n_patches,
    )?;
    let layers = vec![
        Layer::Linear(embed),
        Layer::Attention(attn),
        Layer::Linear(LinearLayer::glorot(
            n_patches * mlp_hidden,
            n_patches * embed_dim,
            &mut rng,
        )),
        Layer::Activation(ActKind::Relu),
        Layer::Linear(LinearLayer::glorot(
            n_patches * embed_dim,
            n_patches * mlp_hidden,
            &mut rng,
        )),
        Layer::MeanPool { groups: n_patches },
        Layer::SoftmaxHead(LinearLayer::glorot(classes, embed_dim, &mut rng)),
    ];
    ModelGraph::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_head_gives_uniform_probabilities() {
        let w = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let head = LinearLayer::digital(w, vec![0.0; 2]);
        let mut model = ModelGraph::new(vec![Layer::SoftmaxHead(head)]).unwrap();
        let x = Matrix::from_rows(vec![vec![0.0, 0.0]]).unwrap();
        let logits = model.forward_batch(&x, false);
        let p = softmax(logits.row(0));
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_known_values() {
        let logits = Matrix::from_rows(vec![vec![0.0, 0.0]]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad.get(0, 0) + 0.5).abs() < 1e-12);
        assert!((grad.get(0, 1) - 0.5).abs() < 1e-12);
        // Confident correct prediction: loss near zero.
        let logits = Matrix::from_rows(vec![vec![30.0, 0.0]]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-12);
        assert!(cross_entropy(&logits, &[5]).is_err());
    }

    #[test]
    fn mlp_has_documented_parameter_count() {
        let mut m = build_mlp(&[4, 8, 2], 1).unwrap();
        assert_eq!(m.digital_params().len(), 58);
        assert_eq!(m.in_dim(), 4);
        assert_eq!(m.class_count(), 2);
    }

    #[test]
    fn builders_are_seed_deterministic() {
        let mut a = build_mlp(&[6, 10, 3], 42).unwrap();
        let mut b = build_mlp(&[6, 10, 3], 42).unwrap();
        let mut c = build_mlp(&[6, 10, 3], 43).unwrap();
        assert_eq!(a.param_hash(true), b.param_hash(true));
        assert_ne!(a.param_hash(true), c.param_hash(true));
    }

    #[test]
    fn head_replacement_keeps_body_bits() {
        let mut m = build_mlp(&[6, 10, 10], 7).unwrap();
        let body = m.param_hash(false);
        let all = m.param_hash(true);
        m.replace_head(2, 99).unwrap();
        assert_eq!(m.param_hash(false), body);
        assert_ne!(m.param_hash(true), all);
        assert_eq!(m.class_count(), 2);
        assert!(m.replace_head(1, 99).is_err());
    }

    #[test]
    fn conversion_preserves_logits_when_exact() {
        let mut digital = build_mlp(&[5, 8, 3], 11).unwrap();
        let mut analog = digital.clone();
        analog.convert_to_analog(&TileConfig::ideal(), 0.0, 123).unwrap();
        let x = Matrix::from_fn(4, 5, |i, j| ((i + 2 * j) as f64 * 0.37).sin() * 0.5);
        let a = digital.forward_batch(&x, false);
        let b = analog.forward_batch(&x, false);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
        // One-shot: converting again is an error, and every tile was
        // programmed exactly once.
        assert!(analog.convert_to_analog(&TileConfig::ideal(), 0.0, 5).is_err());
        analog.for_each_linear_mut(&mut |_, l| {
            assert_eq!(l.tile_mut().unwrap().program_count(), 1);
        });
    }

    #[test]
    fn conversion_maps_wide_weights_through_an_output_scale() {
        let mut digital = build_mlp(&[5, 8, 3], 11).unwrap();
        let params: Vec<f64> = digital.digital_params().iter().map(|v| v * 4.0).collect();
        digital.set_digital_params(&params);
        let mut analog = digital.clone();
        analog.convert_to_analog(&TileConfig::default(), 0.0, 123).unwrap();

        let mut scales = Vec::new();
        analog.for_each_linear_mut(&mut |_, l| {
            let s = l.out_scale();
            let dev = l.tile_mut().unwrap().clean_weights();
            let max_dev = dev.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(s >= 1.0);
            assert!(max_dev <= 1.0 + 1e-12, "device values stay inside the window");
            scales.push(s);
        });
        assert!(scales.iter().any(|&s| s > 1.0), "the stretch must trigger scaling");

        let x = Matrix::from_fn(4, 5, |i, j| ((i + 2 * j) as f64 * 0.37).sin() * 0.5);
        let ys = vec![0usize, 1, 2, 0];
        let a = digital.forward_batch(&x, true);
        let b = analog.forward_batch(&x, true);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-9, "{u} vs {v}");
        }

        // Bias grads are scale-free; cached deltas divide the scale out so
        // trainer steps land where a digital layer's would. Matching bias
        // grads on the early layer also pins the dx chain rule.
        let (_, d1) = cross_entropy(&a, &ys).unwrap();
        let (_, d2) = cross_entropy(&b, &ys).unwrap();
        digital.backward_batch(&d1);
        analog.backward_batch(&d2);
        let mut dig = Vec::new();
        digital.for_each_linear_mut(&mut |_, l| {
            let deltas: Vec<Vec<f64>> = l.update_pairs().map(|(_, d)| d.to_vec()).collect();
            dig.push((l.grad_b().to_vec(), deltas));
        });
        let mut k = 0;
        analog.for_each_linear_mut(&mut |_, l| {
            let (gb, deltas) = &dig[k];
            let s = l.out_scale();
            for (u, v) in l.grad_b().iter().zip(gb) {
                assert!((u - v).abs() < 1e-9, "bias grad moved: {u} vs {v}");
            }
            for ((_, da), dd) in l.update_pairs().zip(deltas) {
                for (u, v) in da.iter().zip(dd) {
                    assert!((u - v / s).abs() < 1e-9, "delta must divide the scale out");
                }
            }
            k += 1;
        });
    }

    #[test]
    fn single_token_attention_is_a_linear_path() {
        // With one token the softmax collapses to 1 and the block reduces
        // to proj(v(x)); q and k cannot influence the output.
        let e = 4;
        let mk = |scale: f64| {
            LinearLayer::digital(
                Matrix::from_fn(e, e, |i, j| scale * ((i * e + j) as f64 * 0.3).sin()),
                (0..e).map(|i| 0.01 * i as f64).collect(),
            )
        };
        let (q, k, v, proj) = (mk(10.0), mk(-3.0), mk(1.0), mk(0.5));
        let v_w = Matrix::from_fn(e, e, |i, j| ((i * e + j) as f64 * 0.3).sin());
        let v_b: Vec<f64> = (0..e).map(|i| 0.01 * i as f64).collect();
        let p_w = Matrix::from_fn(e, e, |i, j| 0.5 * ((i * e + j) as f64 * 0.3).sin());
        let p_b = v_b.clone();

        let attn = AttentionBlock::new(q, k, v, proj, 2, 1).unwrap();
        let head = LinearLayer::digital(
            Matrix::from_fn(2, e, |i, j| if i == 0 { 0.1 * j as f64 } else { -0.05 }),
            vec![0.0; 2],
        );
        let mut model =
            ModelGraph::new(vec![Layer::Attention(attn), Layer::SoftmaxHead(head)]).unwrap();

        let x = [0.3, -0.7, 0.2, 0.9];
        let logits = model.forward_batch(&Matrix::from_vec(1, 4, x.to_vec()).unwrap(), false);

        // Hand computation of proj(v(x)) + biases.
        let mut vx = v_w.matvec(&x);
        for (a, b) in vx.iter_mut().zip(&v_b) {
            *a += b;
        }
        let mut px = p_w.matvec(&vx);
        for (a, b) in px.iter_mut().zip(&p_b) {
            *a += b;
        }
        let Layer::SoftmaxHead(h) = &model.layers()[1] else {
            unreachable!()
        };
        let Backing::Digital(hw) = h.backing() else {
            unreachable!()
        };
        let expect = hw.matvec(&px);
        for (u, v) in logits.row(0).iter().zip(&expect) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }

    #[test]
    fn finite_differences_validate_mlp_gradients() {
        let mut m = build_mlp(&[3, 5, 4, 2], 21).unwrap();
        let xs = Matrix::from_fn(6, 3, |i, j| ((i * 3 + j) as f64 * 0.7).sin());
        let ys = vec![0, 1, 0, 1, 1, 0];
        check_grads(&mut m, &xs, &ys);
    }

    #[test]
    fn finite_differences_validate_attention_gradients() {
        let mut m = build_attention_classifier(3, 2, 4, 2, 5, 2, 33).unwrap();
        let xs = Matrix::from_fn(4, 6, |i, j| ((i * 6 + j) as f64 * 0.9).cos());
        let ys = vec![0, 1, 1, 0];
        check_grads(&mut m, &xs, &ys);
    }

    fn check_grads(m: &mut ModelGraph, xs: &Matrix, ys: &[usize]) {
        let logits = m.forward_batch(xs, true);
        let (_, dlogits) = cross_entropy(&logits, ys).unwrap();
        m.backward_batch(&dlogits);
        let grads = m.digital_grads();
        let mut params = m.digital_params();
        let eps = 1e-5;
        for p in 0..params.len() {
            let orig = params[p];
            params[p] = orig + eps;
            m.set_digital_params(&params);
            let (lp, _) = cross_entropy(&m.forward_batch(xs, false), ys).unwrap();
            params[p] = orig - eps;
            m.set_digital_params(&params);
            let (lm, _) = cross_entropy(&m.forward_batch(xs, false), ys).unwrap();
            params[p] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let bp = grads[p];
            let denom = fd.abs().max(bp.abs()).max(1e-6);
            assert!(
                (fd - bp).abs() / denom < 1e-4,
                "param {p}: fd {fd} vs bp {bp}"
            );
        }
        m.set_digital_params(&params);
    }

    #[test]
    fn evaluate_counts_errors() {
        let w = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let head = LinearLayer::digital(w, vec![0.0; 2]);
        let mut model = ModelGraph::new(vec![Layer::SoftmaxHead(head)]).unwrap();
        let xs = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (err, loss) = evaluate(&mut model, &xs, &[0, 1, 1]).unwrap();
        assert!((err - 100.0 / 3.0).abs() < 1e-9);
        assert!(loss > 0.0);
    }

    #[test]
    fn mean_pool_averages_groups() {
        let head = LinearLayer::digital(
            Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.0; 2],
        );
        let mut model = ModelGraph::new(vec![
            Layer::MeanPool { groups: 2 },
            Layer::SoftmaxHead(head),
        ])
        .unwrap();
        let x = Matrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = model.forward_batch(&x, false);
        assert_eq!(y.row(0), &[2.0, 3.0]);
    }
}
