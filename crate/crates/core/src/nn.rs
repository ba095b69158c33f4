//! Minimal differentiable building blocks with hand-written backward passes.
//!
//! Row-vector convention throughout: activations are `(rows, features)` and a
//! dense layer computes `y = x W + b` with `W: (d_in, d_out)`.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub trainable: bool,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl Param {
    pub fn new(value: Array2<f64>, decay: bool) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: true,
            decay,
        }
    }

    pub fn zeros(rows: usize, cols: usize, decay: bool) -> Self {
        Param::new(Array2::zeros((rows, cols)), decay)
    }

    pub fn normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).unwrap();
        Param::new(
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng)),
            true,
        )
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound);
        Param::new(
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng)),
            true,
        )
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn shape(&self) -> [usize; 2] {
        let (r, c) = self.value.dim();
        [r, c]
    }
}

/// Named traversal over parameters, in a fixed deterministic order.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Low-rank adapter: adds `scale * x A^T B^T` with `A: (r, d_in)`,
/// `B: (d_out, r)` and `scale = alpha / r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Param,
    pub b: Param,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
    pub lora: Option<LoraAdapter>,
}

/// Saved intermediate of the adapter path, needed for its backward.
#[derive(Debug, Clone, Default)]
pub struct LinearCache {
    lora_u: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(w: Param, b: Option<Param>) -> Self {
        Linear { w, b, lora: None }
    }

    /// `N(0, std)` weights and zero bias.
    pub fn normal<R: Rng>(d_in: usize, d_out: usize, std: f64, bias: bool, rng: &mut R) -> Self {
        let w = Param::normal(d_in, d_out, std, rng);
        let b = bias.then(|| Param::zeros(1, d_out, false));
        Linear::new(w, b)
    }

    /// Uniform `±1/sqrt(d_in)` for weights and bias.
    pub fn fan_in<R: Rng>(d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = Param::uniform(d_in, d_out, bound, rng);
        let b = bias.then(|| {
            let mut p = Param::uniform(1, d_out, bound, rng);
            p.decay = false;
            p
        });
        Linear::new(w, b)
    }

    pub fn d_in(&self) -> usize {
        self.w.value.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w.value.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LinearCache) {
        let mut y = x.dot(&self.w.value);
        if let Some(b) = &self.b {
            y += &b.value;
        }
        let mut cache = LinearCache::default();
        if let Some(l) = &self.lora {
            let u = x.dot(&l.a.value.t());
            y.scaled_add(l.scale, &u.dot(&l.b.value.t()));
            cache.lora_u = Some(u);
        }
        (y, cache)
    }

    /// Accumulates parameter gradients; returns `dL/dx` when `need_dx`.
    pub fn backward(
        &mut self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        cache: &LinearCache,
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        if self.w.trainable {
            self.w.grad += &x.t().dot(&dy);
        }
        if let Some(b) = self.b.as_mut().filter(|b| b.trainable) {
            b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let mut dx = need_dx.then(|| dy.dot(&self.w.value.t()));
        if let Some(l) = self.lora.as_mut() {
            let u = cache.lora_u.as_ref().expect("adapter cache missing");
            if l.b.trainable {
                l.b.grad.scaled_add(l.scale, &dy.t().dot(u));
            }
            if l.a.trainable || need_dx {
                let du = dy.dot(&l.b.value) * l.scale;
                if l.a.trainable {
                    l.a.grad += &du.t().dot(&x);
                }
                if let Some(dx) = dx.as_mut() {
                    *dx += &du.dot(&l.a.value);
                }
            }
        }
        dx
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.w);
        if let Some(b) = &self.b {
            f(&join(prefix, "bias"), b);
        }
        if let Some(l) = &self.lora {
            f(&join(prefix, "lora_a"), &l.a);
            f(&join(prefix, "lora_b"), &l.b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&join(prefix, "bias"), b);
        }
        if let Some(l) = &mut self.lora {
            f(&join(prefix, "lora_a"), &mut l.a);
            f(&join(prefix, "lora_b"), &mut l.b);
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Param::new(Array2::ones((1, dim)), false),
            bias: Param::zeros(1, dim, false),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (n, d) = x.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut rstd = Vec::with_capacity(n);
        for (row, mut out) in x.rows().into_iter().zip(xhat.rows_mut()) {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * r);
            rstd.push(r);
        }
        let y = &xhat * &self.gain.value + &self.bias.value;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, dy: ArrayView2<f64>, cache: &LayerNormCache) -> Array2<f64> {
        if self.gain.trainable {
            self.gain.grad += &(&dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        if self.bias.trainable {
            self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let dxhat = &dy * &self.gain.value;
        let d = dxhat.ncols() as f64;
        let mut dx = Array2::zeros(dxhat.raw_dim());
        for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(i);
            let h = cache.xhat.row(i);
            let mean_g = g.sum() / d;
            let mean_gh = g.dot(&h) / d;
            let r = cache.rstd[i];
            Zip::from(&mut out)
                .and(&g)
                .and(&h)
                .for_each(|o, &gv, &hv| *o = r * (gv - mean_g - hv * mean_gh));
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Inverted dropout mask (`0` or `1/(1-p)`), or `None` when inactive.
pub fn dropout_mask<R: Rng>(
    rows: usize,
    cols: usize,
    p: f64,
    rng: Option<&mut R>,
) -> Option<Array2<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_simple_fn((rows, cols), || {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}
