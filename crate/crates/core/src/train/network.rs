//! Batched forward/backward over a copy of a [`Model`]'s parameters.
//!
//! Convolutions are lowered to im2col + GEMM here; this path only serves
//! training and never feeds the inference engine.

use super::gemm::{gemm, Scalar, View};
use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerSpec, Model};
use crate::tensor::{Dense, FilterBank};

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    m: usize,
    n: usize,
    k: usize,
    s: usize,
    p: usize,
    hin: usize,
    win: usize,
    hout: usize,
    wout: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.n * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.hout * self.wout
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let hw = self.plane();
        for n in 0..self.n {
            let src = &x[n * self.hin * self.win..(n + 1) * self.hin * self.win];
            for i in 0..self.k {
                for j in 0..self.k {
                    let row = (n * self.k + i) * self.k + j;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for y in 0..self.hout {
                        let iy = (y * self.s + i) as isize - self.p as isize;
                        let out = &mut dst[y * self.wout..(y + 1) * self.wout];
                        if iy < 0 || iy >= self.hin as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let line = &src[iy as usize * self.win..(iy as usize + 1) * self.win];
                        for (x, o) in out.iter_mut().enumerate() {
                            let ix = (x * self.s + j) as isize - self.p as isize;
                            *o = if ix >= 0 && ix < self.win as isize {
                                line[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let hw = self.plane();
        for n in 0..self.n {
            let dst = &mut dx[n * self.hin * self.win..(n + 1) * self.hin * self.win];
            for i in 0..self.k {
                for j in 0..self.k {
                    let row = (n * self.k + i) * self.k + j;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for y in 0..self.hout {
                        let iy = (y * self.s + i) as isize - self.p as isize;
                        if iy < 0 || iy >= self.hin as isize {
                            continue;
                        }
                        for x in 0..self.wout {
                            let ix = (x * self.s + j) as isize - self.p as isize;
                            if ix >= 0 && ix < self.win as isize {
                                dst[iy as usize * self.win + ix as usize] =
                                    dst[iy as usize * self.win + ix as usize] + src[y * self.wout + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PoolGeom {
    c: usize,
    hin: usize,
    win: usize,
    hout: usize,
    wout: usize,
    window: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Conv(ConvGeom),
    Relu,
    Pool(PoolGeom),
    Dense { inputs: usize, outputs: usize },
}

#[derive(Debug, Clone)]
struct Layer<T> {
    op: Op,
    in_len: usize,
    out_len: usize,
    w: Vec<T>,
    b: Vec<T>,
}

/// Per-layer weight and bias buffers shaped like a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> Params<T> {
    fn zero(&mut self) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.fill(T::zero());
        }
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .flat_map(|v| v.iter_mut())
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.weights.iter().chain(self.biases.iter()).flat_map(|v| v.iter())
    }
}

struct Tape<T> {
    acts: Vec<Vec<T>>,
    cols: Vec<Vec<T>>,
    argmax: Vec<Vec<u32>>,
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Tape {
            acts: Vec::new(),
            cols: Vec::new(),
            argmax: Vec::new(),
        }
    }
}

/// A trainable copy of a model (everything up to, not including, softmax).
#[derive(Debug, Clone)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    input_len: usize,
    classes: usize,
}

impl<T: Scalar> Network<T> {
    pub fn from_model(model: &Model) -> Result<Self> {
        let mut shape = model.input_shape();
        let input_len = shape.len();
        let mut layers = Vec::new();
        for spec in model.layers() {
            let in_len = shape.len();
            let (op, w, b) = match &spec.kind {
                LayerKind::Conv { filters, padding } => {
                    let (hout, wout) = filters
                        .output_dims(shape.height, shape.width, *padding)
                        .ok_or_else(|| Error::shape(&spec.name, "kernel larger than padded input"))?;
                    let g = ConvGeom {
                        m: filters.out_channels(),
                        n: filters.in_channels(),
                        k: filters.kernel(),
                        s: filters.stride(),
                        p: *padding,
                        hin: shape.height,
                        win: shape.width,
                        hout,
                        wout,
                    };
                    shape = crate::tensor::Shape3::new(g.m, hout, wout);
                    (Op::Conv(g), convert(filters.weights()), convert(filters.biases()))
                }
                LayerKind::Relu => (Op::Relu, vec![], vec![]),
                LayerKind::MaxPool { window, stride } => {
                    let g = PoolGeom {
                        c: shape.channels,
                        hin: shape.height,
                        win: shape.width,
                        hout: (shape.height - window) / stride + 1,
                        wout: (shape.width - window) / stride + 1,
                        window: *window,
                        stride: *stride,
                    };
                    shape = crate::tensor::Shape3::new(g.c, g.hout, g.wout);
                    (Op::Pool(g), vec![], vec![])
                }
                LayerKind::FullyConnected(d) => {
                    shape = crate::tensor::Shape3::new(d.outputs(), 1, 1);
                    (
                        Op::Dense {
                            inputs: d.inputs(),
                            outputs: d.outputs(),
                        },
                        convert(d.weights()),
                        convert(d.biases()),
                    )
                }
                LayerKind::Softmax => break,
            };
            layers.push(Layer {
                op,
                in_len,
                out_len: shape.len(),
                w,
                b,
            });
        }
        Ok(Network {
            layers,
            input_len,
            classes: model.num_classes(),
        })
    }

    /// Writes the current parameters back into a copy of `template`.
    pub fn to_model(&self, template: &Model) -> Result<Model> {
        let mut specs: Vec<LayerSpec> = Vec::with_capacity(template.layers().len());
        for (i, spec) in template.layers().iter().enumerate() {
            let kind = match &spec.kind {
                LayerKind::Conv { filters, padding } => {
                    let l = &self.layers[i];
                    LayerKind::Conv {
                        filters: FilterBank::new(
                            filters.out_channels(),
                            filters.in_channels(),
                            filters.kernel(),
                            filters.stride(),
                            narrow(&l.w),
                            narrow(&l.b),
                        )?,
                        padding: *padding,
                    }
                }
                LayerKind::FullyConnected(d) => {
                    let l = &self.layers[i];
                    LayerKind::FullyConnected(Dense::new(d.inputs(), d.outputs(), narrow(&l.w), narrow(&l.b))?)
                }
                other => other.clone(),
            };
            specs.push(LayerSpec::new(spec.name.clone(), kind));
        }
        Model::new(template.input_shape(), specs, template.class_labels().to_vec())
    }

    pub fn params(&self) -> Params<T> {
        Params {
            weights: self.layers.iter().map(|l| l.w.clone()).collect(),
            biases: self.layers.iter().map(|l| l.b.clone()).collect(),
        }
    }

    pub fn set_params(&mut self, p: &Params<T>) {
        for (l, (w, b)) in self.layers.iter_mut().zip(p.weights.iter().zip(&p.biases)) {
            l.w.copy_from_slice(w);
            l.b.copy_from_slice(b);
        }
    }

    pub fn zero_params(&self) -> Params<T> {
        Params {
            weights: self.layers.iter().map(|l| vec![T::zero(); l.w.len()]).collect(),
            biases: self.layers.iter().map(|l| vec![T::zero(); l.b.len()]).collect(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    fn forward(&self, x: Vec<T>, batch: usize, tape: &mut Tape<T>) {
        tape.acts.clear();
        tape.acts.push(x);
        tape.cols.resize_with(self.layers.len(), Vec::new);
        tape.argmax.resize_with(self.layers.len(), Vec::new);
        for (li, layer) in self.layers.iter().enumerate() {
            let x = tape.acts.last().expect("input pushed");
            let mut y = vec![T::zero(); batch * layer.out_len];
            match layer.op {
                Op::Conv(g) => {
                    let rows = g.col_rows();
                    let hw = g.plane();
                    let cols = &mut tape.cols[li];
                    cols.resize(batch * rows * hw, T::zero());
                    for s in 0..batch {
                        let c = &mut cols[s * rows * hw..(s + 1) * rows * hw];
                        g.im2col(&x[s * layer.in_len..(s + 1) * layer.in_len], c);
                        let out = &mut y[s * layer.out_len..(s + 1) * layer.out_len];
                        gemm(
                            g.m,
                            rows,
                            hw,
                            View::rows(&layer.w, rows),
                            View::rows(c, hw),
                            T::zero(),
                            out,
                        );
                        for (m, plane) in out.chunks_exact_mut(hw).enumerate() {
                            for v in plane {
                                *v = *v + layer.b[m];
                            }
                        }
                    }
                }
                Op::Relu => {
                    for (o, &v) in y.iter_mut().zip(x) {
                        *o = if v > T::zero() { v } else { T::zero() };
                    }
                }
                Op::Pool(g) => {
                    let arg = &mut tape.argmax[li];
                    arg.resize(batch * layer.out_len, 0);
                    for s in 0..batch {
                        let base = s * layer.in_len;
                        for c in 0..g.c {
                            for oy in 0..g.hout {
                                for ox in 0..g.wout {
                                    let mut best = usize::MAX;
                                    for dy in 0..g.window {
                                        for dx in 0..g.window {
                                            let idx =
                                                base + (c * g.hin + oy * g.stride + dy) * g.win + ox * g.stride + dx;
                                            if best == usize::MAX || x[idx] > x[best] {
                                                best = idx;
                                            }
                                        }
                                    }
                                    let o = s * layer.out_len + (c * g.hout + oy) * g.wout + ox;
                                    y[o] = x[best];
                                    arg[o] = best as u32;
                                }
                            }
                        }
                    }
                }
                Op::Dense { inputs, outputs } => {
                    gemm(
                        batch,
                        inputs,
                        outputs,
                        View::rows(x, inputs),
                        View::transposed(&layer.w, inputs),
                        T::zero(),
                        &mut y,
                    );
                    for row in y.chunks_exact_mut(outputs) {
                        for (v, &b) in row.iter_mut().zip(&layer.b) {
                            *v = *v + b;
                        }
                    }
                }
            }
            tape.acts.push(y);
        }
    }

    /// Mean cross-entropy of the batch; gradients are accumulated into `grads`.
    pub fn loss_and_gradients(&self, inputs: &[T], labels: &[usize], grads: &mut Params<T>) -> T {
        let mut tape = Tape::default();
        self.loss_with_tape(inputs, labels, grads, &mut tape)
    }

    fn loss_with_tape(&self, inputs: &[T], labels: &[usize], grads: &mut Params<T>, tape: &mut Tape<T>) -> T {
        let batch = labels.len();
        assert_eq!(inputs.len(), batch * self.input_len);
        self.forward(inputs.to_vec(), batch, tape);
        let logits = tape.acts.last().expect("forward ran");
        let scale = T::one() / T::from(batch).expect("batch size fits");
        let mut loss = T::zero();
        let mut d = vec![T::zero(); logits.len()];
        for (s, &label) in labels.iter().enumerate() {
            let z = &logits[s * self.classes..(s + 1) * self.classes];
            let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = z.iter().fold(T::zero(), |acc, &v| acc + (v - zmax).exp());
            let log_sum = sum.ln() + zmax;
            loss = loss + (log_sum - z[label]);
            let dz = &mut d[s * self.classes..(s + 1) * self.classes];
            for (c, (g, &v)) in dz.iter_mut().zip(z).enumerate() {
                let p = (v - log_sum).exp();
                let target = if c == label { T::one() } else { T::zero() };
                *g = (p - target) * scale;
            }
        }
        self.backward(tape, d, batch, grads);
        loss * scale
    }

    fn backward(&self, tape: &Tape<T>, mut d: Vec<T>, batch: usize, grads: &mut Params<T>) {
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.acts[li];
            let need_dx = li > 0;
            match layer.op {
                Op::Relu => {
                    let y = &tape.acts[li + 1];
                    for (g, &v) in d.iter_mut().zip(y) {
                        if v <= T::zero() {
                            *g = T::zero();
                        }
                    }
                }
                Op::Pool(_) => {
                    let mut dx = vec![T::zero(); batch * layer.in_len];
                    for (&src, &g) in tape.argmax[li].iter().zip(&d) {
                        dx[src as usize] = dx[src as usize] + g;
                    }
                    d = dx;
                }
                Op::Dense { inputs, outputs } => {
                    gemm(
                        outputs,
                        batch,
                        inputs,
                        View::transposed(&d, outputs),
                        View::rows(x, inputs),
                        T::one(),
                        &mut grads.weights[li],
                    );
                    for row in d.chunks_exact(outputs) {
                        for (gb, &g) in grads.biases[li].iter_mut().zip(row) {
                            *gb = *gb + g;
                        }
                    }
                    if need_dx {
                        let mut dx = vec![T::zero(); batch * inputs];
                        gemm(
                            batch,
                            outputs,
                            inputs,
                            View::rows(&d, outputs),
                            View::rows(&layer.w, inputs),
                            T::zero(),
                            &mut dx,
                        );
                        d = dx;
                    }
                }
                Op::Conv(g) => {
                    let rows = g.col_rows();
                    let hw = g.plane();
                    let cols = &tape.cols[li];
                    let mut dx = if need_dx {
                        vec![T::zero(); batch * layer.in_len]
                    } else {
                        Vec::new()
                    };
                    let mut dcols = if need_dx {
                        vec![T::zero(); rows * hw]
                    } else {
                        Vec::new()
                    };
                    for s in 0..batch {
                        let dout = &d[s * layer.out_len..(s + 1) * layer.out_len];
                        let c = &cols[s * rows * hw..(s + 1) * rows * hw];
                        gemm(
                            g.m,
                            hw,
                            rows,
                            View::rows(dout, hw),
                            View::transposed(c, hw),
                            T::one(),
                            &mut grads.weights[li],
                        );
                        for (m, plane) in dout.chunks_exact(hw).enumerate() {
                            grads.biases[li][m] = plane.iter().fold(grads.biases[li][m], |acc, &v| acc + v);
                        }
                        if need_dx {
                            gemm(
                                rows,
                                g.m,
                                hw,
                                View::transposed(&layer.w, rows),
                                View::rows(dout, hw),
                                T::zero(),
                                &mut dcols,
                            );
                            g.col2im(&dcols, &mut dx[s * layer.in_len..(s + 1) * layer.in_len]);
                        }
                    }
                    if need_dx {
                        d = dx;
                    }
                }
            }
        }
    }

    /// One SGD-with-momentum update: `v = μ·v + g; p -= lr·v`.
    pub fn step(&mut self, grads: &Params<T>, velocity: &mut Params<T>, lr: T, momentum: T) {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for (p, (g, v)) in layer
                .w
                .iter_mut()
                .zip(grads.weights[li].iter().zip(velocity.weights[li].iter_mut()))
            {
                *v = momentum * *v + *g;
                *p = *p - lr * *v;
            }
            for (p, (g, v)) in layer
                .b
                .iter_mut()
                .zip(grads.biases[li].iter().zip(velocity.biases[li].iter_mut()))
            {
                *v = momentum * *v + *g;
                *p = *p - lr * *v;
            }
        }
    }
}

/// Reusable per-run state so batches don't reallocate the tape.
pub(crate) struct Workspace<T> {
    tape: Tape<T>,
    pub grads: Params<T>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new(net: &Network<T>) -> Self {
        Workspace {
            tape: Tape::default(),
            grads: net.zero_params(),
        }
    }

    pub fn batch(&mut self, net: &Network<T>, inputs: &[T], labels: &[usize]) -> T {
        self.grads.zero();
        net.loss_with_tape(inputs, labels, &mut self.grads, &mut self.tape)
    }
}

fn convert<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

fn narrow<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|&x| x.to_f32_lossy()).collect()
}
