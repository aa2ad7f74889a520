//! Input linear layer, stacked GRU layers and output linear layer, with a
//! teacher-forced batch forward pass and exact backpropagation through time.
//!
//! Per layer, with input `a` and previous state `h`:
//!
//! ```text
//! z  = sigmoid(W_z a + U_z h + b_z)
//! r  = sigmoid(W_r a + U_r h + b_r)
//! h~ = tanh(W_h a + U_h (r * h) + b_h)
//! h' = (1 - z) * h + z * h~
//! ```
//!
//! The three gate blocks of each layer are stored stacked in the order
//! `z, r, h` so that a whole time step is one matrix product per operand.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ConditionedSequence;
use crate::error::{Error, Result};
use crate::training::softmax_cross_entropy_into;

/// Floating-point type the network can run in: `f32` for training and
/// generation, `f64` for gradient checking.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkDims {
    pub input_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub output_size: usize,
}

impl Default for NetworkDims {
    fn default() -> Self {
        NetworkDims {
            input_size: 4,
            hidden_size: 40,
            num_layers: 4,
            output_size: 256,
        }
    }
}

impl NetworkDims {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.hidden_size == 0 || self.num_layers == 0 || self.output_size == 0 {
            return Err(Error::Shape(format!("all network dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer<F> {
    /// Input-to-gate weights, `3H x H`, rows stacked `z, r, h`.
    pub w: Array2<F>,
    /// Recurrent weights, `3H x H`, rows stacked `z, r, h`.
    pub u: Array2<F>,
    /// Gate biases, `3H`.
    pub b: Array1<F>,
}

/// All learnable parameters. Arrays are kept in standard (row-major)
/// layout; [`Weights::tensors`] relies on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    pub dims: NetworkDims,
    pub w_in: Array2<F>,
    pub b_in: Array1<F>,
    pub layers: Vec<GruLayer<F>>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
}

impl<F: Real> Weights<F> {
    pub fn zeros(dims: NetworkDims) -> Self {
        let h = dims.hidden_size;
        Weights {
            dims,
            w_in: Array2::zeros((h, dims.input_size)),
            b_in: Array1::zeros(h),
            layers: (0..dims.num_layers)
                .map(|_| GruLayer {
                    w: Array2::zeros((3 * h, h)),
                    u: Array2::zeros((3 * h, h)),
                    b: Array1::zeros(3 * h),
                })
                .collect(),
            w_out: Array2::zeros((dims.output_size, h)),
            b_out: Array1::zeros(dims.output_size),
        }
    }

    /// Matrix entries uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(dims: NetworkDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(dims);
        let fill = |m: &mut Array2<F>, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (m.ncols() as f64).sqrt();
            m.iter_mut()
                .for_each(|x| *x = F::lit(rng.random_range(-bound..=bound)));
        };
        fill(&mut w.w_in, &mut rng);
        for layer in &mut w.layers {
            fill(&mut layer.w, &mut rng);
            fill(&mut layer.u, &mut rng);
        }
        fill(&mut w.w_out, &mut rng);
        Ok(w)
    }

    /// Parameter tensors in serialization order: `w_in, b_in`, then per
    /// layer `w, u, b`, then `w_out, b_out`.
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = vec![contiguous(self.w_in.as_slice()), contiguous(self.b_in.as_slice())];
        for l in &self.layers {
            out.push(contiguous(l.w.as_slice()));
            out.push(contiguous(l.u.as_slice()));
            out.push(contiguous(l.b.as_slice()));
        }
        out.push(contiguous(self.w_out.as_slice()));
        out.push(contiguous(self.b_out.as_slice()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![
            contiguous(self.w_in.as_slice_mut()),
            contiguous(self.b_in.as_slice_mut()),
        ];
        for l in &mut self.layers {
            out.push(contiguous(l.w.as_slice_mut()));
            out.push(contiguous(l.u.as_slice_mut()));
            out.push(contiguous(l.b.as_slice_mut()));
        }
        out.push(contiguous(self.w_out.as_slice_mut()));
        out.push(contiguous(self.b_out.as_slice_mut()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks every array against `dims`, layout, and finiteness.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let d = self.dims;
        let h = d.hidden_size;
        let check2 = |name: &str, m: &Array2<F>, rows: usize, cols: usize| {
            if m.dim() != (rows, cols) || !m.is_standard_layout() {
                return Err(Error::Shape(format!("{name} is {:?}, expected ({rows}, {cols})", m.dim())));
            }
            Ok(())
        };
        let check1 = |name: &str, v: &Array1<F>, len: usize| {
            if v.len() != len || !v.is_standard_layout() {
                return Err(Error::Shape(format!("{name} has {} entries, expected {len}", v.len())));
            }
            Ok(())
        };
        check2("w_in", &self.w_in, h, d.input_size)?;
        check1("b_in", &self.b_in, h)?;
        if self.layers.len() != d.num_layers {
            return Err(Error::Shape(format!(
                "{} layers, expected {}",
                self.layers.len(),
                d.num_layers
            )));
        }
        for l in &self.layers {
            check2("layer w", &l.w, 3 * h, h)?;
            check2("layer u", &l.u, 3 * h, h)?;
            check1("layer b", &l.b, 3 * h)?;
        }
        check2("w_out", &self.w_out, d.output_size, h)?;
        check1("b_out", &self.b_out, d.output_size)?;
        if self.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("weights"));
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> Weights<G> {
        let c2 = |m: &Array2<F>| m.mapv(|x| G::lit(x.to_f64()));
        let c1 = |v: &Array1<F>| v.mapv(|x| G::lit(x.to_f64()));
        Weights {
            dims: self.dims,
            w_in: c2(&self.w_in),
            b_in: c1(&self.b_in),
            layers: self
                .layers
                .iter()
                .map(|l| GruLayer {
                    w: c2(&l.w),
                    u: c2(&l.u),
                    b: c1(&l.b),
                })
                .collect(),
            w_out: c2(&self.w_out),
            b_out: c1(&self.b_out),
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Weights<F>, scale: F) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape("gradient dims differ".into()));
        }
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * *s;
            }
        }
        Ok(())
    }
}

fn contiguous<T>(s: Option<T>) -> T {
    s.expect("weight arrays must be in standard layout")
}

/// Hidden state of every layer, `num_layers x hidden_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState<F> {
    pub h: Array2<F>,
}

impl<F: Real> HiddenState<F> {
    pub fn zeros(dims: NetworkDims) -> Self {
        HiddenState {
            h: Array2::zeros((dims.num_layers, dims.hidden_size)),
        }
    }
}

/// One generation step, straight from the gate equations.
pub fn forward_step<F: Real>(
    weights: &Weights<F>,
    x: &[F],
    state: &HiddenState<F>,
) -> Result<(Array1<F>, HiddenState<F>)> {
    let d = weights.dims;
    let h = d.hidden_size;
    if x.len() != d.input_size {
        return Err(Error::Shape(format!("input has {} components, expected {}", x.len(), d.input_size)));
    }
    if state.h.dim() != (d.num_layers, h) {
        return Err(Error::Shape(format!("hidden state is {:?}", state.h.dim())));
    }
    let mut a = weights.w_in.dot(&ArrayView1::from(x)) + &weights.b_in;
    let mut next = state.clone();
    for (l, layer) in weights.layers.iter().enumerate() {
        let hp = state.h.row(l);
        let ga = layer.w.dot(&a) + &layer.b;
        let gu = layer.u.slice(s![..2 * h, ..]).dot(&hp);
        let z: Array1<F> = (0..h).map(|i| sigmoid(ga[i] + gu[i])).collect();
        let r: Array1<F> = (0..h).map(|i| sigmoid(ga[h + i] + gu[h + i])).collect();
        let rh = &r * &hp;
        let gc = layer.u.slice(s![2 * h.., ..]).dot(&rh);
        let hn: Array1<F> = (0..h)
            .map(|i| {
                let c = (ga[2 * h + i] + gc[i]).tanh();
                (F::one() - z[i]) * hp[i] + z[i] * c
            })
            .collect();
        next.h.row_mut(l).assign(&hn);
        a = hn;
    }
    let logits = weights.w_out.dot(&a) + &weights.b_out;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok((logits, next))
}

/// Per-layer activations cached for BPTT. Every array is
/// `(steps * batch) x hidden`, row `t * batch + b`.
#[derive(Debug, Clone)]
pub struct LayerTrace<F> {
    pub z: Array2<F>,
    pub r: Array2<F>,
    /// Candidate state `h~`.
    pub c: Array2<F>,
    pub h: Array2<F>,
    /// `r * h_prev`.
    pub rh: Array2<F>,
}

/// Everything a teacher-forced forward pass produced, time-major.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    pub batch: usize,
    pub steps: usize,
    /// `(steps * batch) x input_size`.
    pub inputs: Array2<F>,
    pub targets: Vec<usize>,
    /// Initial state per layer, `batch x hidden`.
    pub h0: Vec<Array2<F>>,
    /// Output of the input linear layer.
    pub v: Array2<F>,
    pub layers: Vec<LayerTrace<F>>,
    /// `(steps * batch) x output_size`.
    pub logits: Array2<F>,
}

impl<F: Real> ForwardTrace<F> {
    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    /// Hidden state of batch member `b` after the last step.
    pub fn final_state(&self, b: usize) -> HiddenState<F> {
        let hsz = self.v.ncols();
        let mut h = Array2::zeros((self.layers.len(), hsz));
        for (l, lt) in self.layers.iter().enumerate() {
            let row = if self.steps == 0 {
                self.h0[l].row(b).to_owned()
            } else {
                lt.h.row((self.steps - 1) * self.batch + b).to_owned()
            };
            h.row_mut(l).assign(&row);
        }
        HiddenState { h }
    }
}

/// Teacher-forced pass over one sequence; returns the trace and the mean
/// per-step cross-entropy.
pub fn run_sequence<F: Real>(
    weights: &Weights<F>,
    seq: &ConditionedSequence,
    initial: &HiddenState<F>,
) -> Result<(ForwardTrace<F>, F)> {
    run_batch(weights, std::slice::from_ref(seq), Some(std::slice::from_ref(initial)))
}

/// Teacher-forced pass over equal-length sequences. `initial` defaults to
/// the zero state for every member. The loss is the mean over members and
/// steps.
pub fn run_batch<F: Real>(
    weights: &Weights<F>,
    seqs: &[ConditionedSequence],
    initial: Option<&[HiddenState<F>]>,
) -> Result<(ForwardTrace<F>, F)> {
    let d = weights.dims;
    let hsz = d.hidden_size;
    let batch = seqs.len();
    if batch == 0 {
        return Err(Error::Empty("batch"));
    }
    if d.input_size != 4 {
        return Err(Error::Shape("sequences carry 4-component inputs".into()));
    }
    let steps = seqs[0].len();
    if seqs.iter().any(|s| s.len() != steps) {
        return Err(Error::Shape("batch sequences differ in length".into()));
    }
    let n = steps * batch;

    let mut inputs = Array2::zeros((n, d.input_size));
    let mut targets = vec![0usize; n];
    for (b, seq) in seqs.iter().enumerate() {
        for (t, (x, &target)) in seq.inputs().iter().zip(seq.targets()).enumerate() {
            let row = t * batch + b;
            for (k, &v) in x.iter().enumerate() {
                inputs[[row, k]] = F::lit(v);
            }
            if target.index() >= d.output_size {
                return Err(Error::Shape(format!("target {} exceeds output size", target.index())));
            }
            targets[row] = target.index();
        }
    }

    let h0: Vec<Array2<F>> = (0..d.num_layers)
        .map(|l| {
            let mut m = Array2::zeros((batch, hsz));
            if let Some(init) = initial {
                for (b, st) in init.iter().enumerate().take(batch) {
                    m.row_mut(b).assign(&st.h.row(l));
                }
            }
            m
        })
        .collect();
    if let Some(init) = initial {
        if init.len() != batch || init.iter().any(|s| s.h.dim() != (d.num_layers, hsz)) {
            return Err(Error::Shape("initial states do not match batch".into()));
        }
    }

    let mut v = Array2::zeros((n, hsz));
    general_mat_mul(F::one(), &inputs, &weights.w_in.t(), F::zero(), &mut v);
    v += &weights.b_in;

    let mut layers: Vec<LayerTrace<F>> = Vec::with_capacity(d.num_layers);
    for (l, layer) in weights.layers.iter().enumerate() {
        let a_all = if l == 0 { &v } else { &layers[l - 1].h };
        let trace = layer_forward(layer, a_all, &h0[l], batch, steps)?;
        layers.push(trace);
    }

    let top = &layers[d.num_layers - 1].h;
    let mut logits = Array2::zeros((n, d.output_size));
    general_mat_mul(F::one(), top, &weights.w_out.t(), F::zero(), &mut logits);
    logits += &weights.b_out;

    let mut total = 0.0f64;
    for (row, &target) in logits.rows().into_iter().zip(&targets) {
        let row = row.as_slice().ok_or_else(|| Error::Shape("logit row layout".into()))?;
        total += softmax_cross_entropy_into(row, target, None)?.to_f64();
    }
    let loss = F::lit(total / n as f64);

    Ok((
        ForwardTrace {
            batch,
            steps,
            inputs,
            targets,
            h0,
            v,
            layers,
            logits,
        },
        loss,
    ))
}

fn layer_forward<F: Real>(
    layer: &GruLayer<F>,
    a_all: &Array2<F>,
    h0: &Array2<F>,
    batch: usize,
    steps: usize,
) -> Result<LayerTrace<F>> {
    let hsz = h0.ncols();
    let n = batch * steps;
    let mut ga = Array2::zeros((n, 3 * hsz));
    general_mat_mul(F::one(), a_all, &layer.w.t(), F::zero(), &mut ga);
    ga += &layer.b;
    let u_zr = layer.u.slice(s![..2 * hsz, ..]);
    let u_h = layer.u.slice(s![2 * hsz.., ..]);

    let mut z = Array2::zeros((n, hsz));
    let mut r = Array2::zeros((n, hsz));
    let mut c = Array2::zeros((n, hsz));
    let mut h = Array2::zeros((n, hsz));
    let mut rh = Array2::zeros((n, hsz));

    let mut hprev = h0.clone();
    let mut gr = Array2::<F>::zeros((batch, 2 * hsz));
    let mut gc = Array2::<F>::zeros((batch, hsz));
    let mut rh_blk = Array2::<F>::zeros((batch, hsz));

    let ga_s = ga.as_slice().expect("fresh array");
    for t in 0..steps {
        general_mat_mul(F::one(), &hprev, &u_zr.t(), F::zero(), &mut gr);
        {
            let gr_s = gr.as_slice().expect("fresh array");
            let hp_s = hprev.as_slice().expect("fresh array");
            let zs = z.as_slice_mut().expect("fresh array");
            let rs = r.as_slice_mut().expect("fresh array");
            let rh_s = rh_blk.as_slice_mut().expect("fresh array");
            for b in 0..batch {
                let row = t * batch + b;
                let g = &ga_s[row * 3 * hsz..(row + 1) * 3 * hsz];
                let u = &gr_s[b * 2 * hsz..(b + 1) * 2 * hsz];
                for i in 0..hsz {
                    let zv = sigmoid(g[i] + u[i]);
                    let rv = sigmoid(g[hsz + i] + u[hsz + i]);
                    zs[row * hsz + i] = zv;
                    rs[row * hsz + i] = rv;
                    rh_s[b * hsz + i] = rv * hp_s[b * hsz + i];
                }
            }
        }
        general_mat_mul(F::one(), &rh_blk, &u_h.t(), F::zero(), &mut gc);
        {
            let gc_s = gc.as_slice().expect("fresh array");
            let zs = z.as_slice().expect("fresh array");
            let cs = c.as_slice_mut().expect("fresh array");
            let hs = h.as_slice_mut().expect("fresh array");
            let rh_all = rh.as_slice_mut().expect("fresh array");
            let rh_s = rh_blk.as_slice().expect("fresh array");
            let hp_s = hprev.as_slice_mut().expect("fresh array");
            for b in 0..batch {
                let row = t * batch + b;
                for i in 0..hsz {
                    let k = row * hsz + i;
                    let cv = (ga_s[row * 3 * hsz + 2 * hsz + i] + gc_s[b * hsz + i]).tanh();
                    let zv = zs[k];
                    let hp = hp_s[b * hsz + i];
                    let hv = (F::one() - zv) * hp + zv * cv;
                    cs[k] = cv;
                    hs[k] = hv;
                    rh_all[k] = rh_s[b * hsz + i];
                    hp_s[b * hsz + i] = hv;
                }
            }
        }
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hidden state"));
    }
    Ok(LayerTrace { z, r, c, h, rh })
}

/// Exact gradient of the trace's mean loss with respect to every parameter
/// (full BPTT over all steps).
pub fn backward<F: Real>(weights: &Weights<F>, trace: &ForwardTrace<F>) -> Result<Weights<F>> {
    let d = weights.dims;
    let n = trace.batch * trace.steps;
    if trace.layers.len() != d.num_layers || trace.logits.dim() != (n, d.output_size) {
        return Err(Error::Shape("trace does not match weights".into()));
    }
    let mut grads = Weights::zeros(d);
    if n == 0 {
        return Ok(grads);
    }
    let inv_n = F::lit(1.0 / n as f64);

    let mut dlogits = Array2::zeros((n, d.output_size));
    for ((row, mut drow), &target) in trace
        .logits
        .rows()
        .into_iter()
        .zip(dlogits.rows_mut())
        .zip(&trace.targets)
    {
        let row = row.as_slice().expect("fresh array");
        let drow = drow.as_slice_mut().expect("fresh array");
        softmax_cross_entropy_into(row, target, Some(drow))?;
        drow.iter_mut().for_each(|g| *g *= inv_n);
    }

    let top = &trace.layers[d.num_layers - 1].h;
    general_mat_mul(F::one(), &dlogits.t(), top, F::zero(), &mut grads.w_out);
    grads.b_out = dlogits.sum_axis(Axis(0));
    let mut dext = Array2::zeros((n, d.hidden_size));
    general_mat_mul(F::one(), &dlogits, &weights.w_out, F::zero(), &mut dext);
    drop(dlogits);

    for l in (0..d.num_layers).rev() {
        let a_all = if l == 0 { &trace.v } else { &trace.layers[l - 1].h };
        dext = layer_backward(
            &weights.layers[l],
            &trace.layers[l],
            a_all,
            &trace.h0[l],
            &dext,
            trace.batch,
            trace.steps,
            &mut grads.layers[l],
        );
    }

    general_mat_mul(F::one(), &dext.t(), &trace.inputs, F::zero(), &mut grads.w_in);
    grads.b_in = dext.sum_axis(Axis(0));
    Ok(grads)
}

/// Backpropagates one layer; returns the gradient with respect to the
/// layer's input sequence.
#[allow(clippy::too_many_arguments)]
fn layer_backward<F: Real>(
    layer: &GruLayer<F>,
    lt: &LayerTrace<F>,
    a_all: &Array2<F>,
    h0: &Array2<F>,
    dext: &Array2<F>,
    batch: usize,
    steps: usize,
    grad: &mut GruLayer<F>,
) -> Array2<F> {
    let hsz = h0.ncols();
    let n = batch * steps;
    let u_zr = layer.u.slice(s![..2 * hsz, ..]);
    let u_h = layer.u.slice(s![2 * hsz.., ..]);

    let mut dg = Array2::<F>::zeros((n, 3 * hsz));
    let mut dcarry = Array2::<F>::zeros((batch, hsz));
    let mut d_rh = Array2::<F>::zeros((batch, hsz));

    let zs = lt.z.as_slice().expect("fresh array");
    let rs = lt.r.as_slice().expect("fresh array");
    let cs = lt.c.as_slice().expect("fresh array");
    let hs = lt.h.as_slice().expect("fresh array");
    let h0s = h0.as_slice().expect("fresh array");
    let dext_s = dext.as_slice().expect("fresh array");

    let hprev = |t: usize, b: usize, i: usize| -> F {
        if t == 0 {
            h0s[b * hsz + i]
        } else {
            hs[((t - 1) * batch + b) * hsz + i]
        }
    };

    for t in (0..steps).rev() {
        {
            let dgs = dg.as_slice_mut().expect("fresh array");
            let dc_s = dcarry.as_slice_mut().expect("fresh array");
            for b in 0..batch {
                let row = t * batch + b;
                for i in 0..hsz {
                    let k = row * hsz + i;
                    let dh = dext_s[k] + dc_s[b * hsz + i];
                    let (zv, cv, hp) = (zs[k], cs[k], hprev(t, b, i));
                    let dcand = dh * zv;
                    let dz = dh * (cv - hp);
                    dc_s[b * hsz + i] = dh * (F::one() - zv);
                    dgs[row * 3 * hsz + 2 * hsz + i] = dcand * (F::one() - cv * cv);
                    dgs[row * 3 * hsz + i] = dz * zv * (F::one() - zv);
                }
            }
        }
        let rows = s![t * batch..(t + 1) * batch, ..];
        general_mat_mul(
            F::one(),
            &dg.slice(rows).slice(s![.., 2 * hsz..]),
            &u_h,
            F::zero(),
            &mut d_rh,
        );
        {
            let dgs = dg.as_slice_mut().expect("fresh array");
            let dc_s = dcarry.as_slice_mut().expect("fresh array");
            let drh_s = d_rh.as_slice().expect("fresh array");
            for b in 0..batch {
                let row = t * batch + b;
                for i in 0..hsz {
                    let k = row * hsz + i;
                    let rv = rs[k];
                    let drh = drh_s[b * hsz + i];
                    dc_s[b * hsz + i] += drh * rv;
                    let dr = drh * hprev(t, b, i);
                    dgs[row * 3 * hsz + hsz + i] = dr * rv * (F::one() - rv);
                }
            }
        }
        general_mat_mul(
            F::one(),
            &dg.slice(rows).slice(s![.., ..2 * hsz]),
            &u_zr,
            F::one(),
            &mut dcarry,
        );
    }

    general_mat_mul(F::one(), &dg.t(), a_all, F::zero(), &mut grad.w);
    grad.b = dg.sum_axis(Axis(0));

    let mut hprev_all = Array2::zeros((n, hsz));
    hprev_all.slice_mut(s![..batch, ..]).assign(h0);
    if steps > 1 {
        hprev_all
            .slice_mut(s![batch.., ..])
            .assign(&lt.h.slice(s![..n - batch, ..]));
    }
    general_mat_mul(
        F::one(),
        &dg.slice(s![.., ..2 * hsz]).t(),
        &hprev_all,
        F::zero(),
        &mut grad.u.slice_mut(s![..2 * hsz, ..]),
    );
    general_mat_mul(
        F::one(),
        &dg.slice(s![.., 2 * hsz..]).t(),
        &lt.rh,
        F::zero(),
        &mut grad.u.slice_mut(s![2 * hsz.., ..]),
    );

    let mut da = Array2::zeros((n, a_all.ncols()));
    general_mat_mul(F::one(), &dg, &layer.w, F::zero(), &mut da);
    da
}

/// Allocation-free single-sample evaluator for generation. Holds transposed
/// copies of the weights so every product is a sequence of contiguous
/// axpy updates.
#[derive(Debug, Clone)]
pub struct StepKernel<F> {
    dims: NetworkDims,
    w_in_t: Vec<F>,
    b_in: Vec<F>,
    layers: Vec<KernelLayer<F>>,
    w_out_t: Vec<F>,
    b_out: Vec<F>,
    a: Vec<F>,
    g: Vec<F>,
    rh: Vec<F>,
    cand: Vec<F>,
    logits: Vec<F>,
    h: Vec<F>,
}

#[derive(Debug, Clone)]
struct KernelLayer<F> {
    /// `H x 3H`
    w_t: Vec<F>,
    /// `H x 2H`
    u_zr_t: Vec<F>,
    /// `H x H`
    u_h_t: Vec<F>,
    b: Vec<F>,
}

fn transpose<F: Real>(m: ndarray::ArrayView2<F>) -> Vec<F> {
    m.t().iter().copied().collect()
}

#[inline]
fn axpy<F: Real>(out: &mut [F], x: F, row: &[F]) {
    for (o, &w) in out.iter_mut().zip(row) {
        *o += x * w;
    }
}

impl<F: Real> StepKernel<F> {
    pub fn new(weights: &Weights<F>) -> Result<Self> {
        weights.validate()?;
        let d = weights.dims;
        let h = d.hidden_size;
        Ok(StepKernel {
            dims: d,
            w_in_t: transpose(weights.w_in.view()),
            b_in: weights.b_in.to_vec(),
            layers: weights
                .layers
                .iter()
                .map(|l| KernelLayer {
                    w_t: transpose(l.w.view()),
                    u_zr_t: transpose(l.u.slice(s![..2 * h, ..])),
                    u_h_t: transpose(l.u.slice(s![2 * h.., ..])),
                    b: l.b.to_vec(),
                })
                .collect(),
            w_out_t: transpose(weights.w_out.view()),
            b_out: weights.b_out.to_vec(),
            a: vec![F::zero(); h],
            g: vec![F::zero(); 3 * h],
            rh: vec![F::zero(); h],
            cand: vec![F::zero(); h],
            logits: vec![F::zero(); d.output_size],
            h: vec![F::zero(); d.num_layers * h],
        })
    }

    pub fn dims(&self) -> NetworkDims {
        self.dims
    }

    pub fn reset(&mut self) {
        self.h.iter_mut().for_each(|v| *v = F::zero());
    }

    /// Current hidden state, layer-major.
    pub fn state(&self) -> &[F] {
        &self.h
    }

    /// Advances one step and returns the logits.
    pub fn step(&mut self, x: &[F]) -> &[F] {
        let hsz = self.dims.hidden_size;
        self.a.copy_from_slice(&self.b_in);
        for (j, &xj) in x.iter().enumerate().take(self.dims.input_size) {
            axpy(&mut self.a, xj, &self.w_in_t[j * hsz..(j + 1) * hsz]);
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let hl = &mut self.h[l * hsz..(l + 1) * hsz];
            self.g.copy_from_slice(&layer.b);
            for (j, &aj) in self.a.iter().enumerate() {
                axpy(&mut self.g, aj, &layer.w_t[j * 3 * hsz..(j + 1) * 3 * hsz]);
            }
            for (j, &hj) in hl.iter().enumerate() {
                axpy(&mut self.g[..2 * hsz], hj, &layer.u_zr_t[j * 2 * hsz..(j + 1) * 2 * hsz]);
            }
            for i in 0..hsz {
                let r = sigmoid(self.g[hsz + i]);
                self.rh[i] = r * hl[i];
            }
            self.cand.iter_mut().for_each(|v| *v = F::zero());
            for (j, &rj) in self.rh.iter().enumerate() {
                axpy(&mut self.cand, rj, &layer.u_h_t[j * hsz..(j + 1) * hsz]);
            }
            for i in 0..hsz {
                let z = sigmoid(self.g[i]);
                let c = (self.g[2 * hsz + i] + self.cand[i]).tanh();
                hl[i] = (F::one() - z) * hl[i] + z * c;
            }
            self.a.copy_from_slice(hl);
        }
        self.logits.copy_from_slice(&self.b_out);
        for (j, &hj) in self.a.iter().enumerate() {
            axpy(&mut self.logits, hj, &self.w_out_t[j * self.dims.output_size..(j + 1) * self.dims.output_size]);
        }
        &self.logits
    }
}
