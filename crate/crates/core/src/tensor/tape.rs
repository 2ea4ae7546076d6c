use ndarray::{s, Array1, Array2, Array3, Axis};

use super::{BatchNormState, ParamId, ParamStore};
use crate::attention::{PositionalScheme, SpikeTensor};
use crate::error::{dim_err, Error, Result};
use crate::neuron::{LifParams, Surrogate};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of the rows fed to [`Tape::spiking_attention`]: `slices` independent
/// `(time-step, sample)` groups of `len` consecutive positions each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub slices: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul { x: Var, w: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Exp { x: Var },
    Sum { x: Var },
    Reshape { x: Var },
    RepeatTime { x: Var, steps: usize },
    MeanTime { x: Var, steps: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, inv_std: Array1<f64>, training: bool },
    Spike { x: Var, steps: usize, charge: Array2<f64>, params: LifParams, surrogate: Surrogate },
    Attention { q: Var, k: Var, v: Var, sigma: Var, spec: AttentionSpec, scores: Array3<f64>, xnor: bool },
    SoftmaxXent { logits: Var, probs: Array2<f64>, targets: Vec<usize> },
    Mse { pred: Var, target: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    param: Option<ParamId>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn add_into(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A constant input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf bound to a stored tensor; its gradient flows back through
    /// [`Tape::accumulate`] when the tensor requires one.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let v = self.push(t.as_matrix(), Op::Leaf);
        if t.requires_grad {
            self.nodes[v.0].param = Some(id);
        }
        v
    }

    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        let (wr, wc) = self.shape(w);
        if xc != wr {
            return Err(dim_err(format!("linear: [{xr}, {xc}] x [{wr}, {wc}]")));
        }
        let out = self.value(x).dot(self.value(w));
        Ok(self.push(out, Op::MatMul { x, w }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Adds a `[1, C]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(dim_err(format!("add_row: row {:?} for {c} columns", self.shape(row))));
        }
        let out = self.value(x) + self.value(row);
        Ok(self.push(out, Op::AddRow { x, row }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!("mul: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        self.push(out, Op::Scale { x, c })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::exp);
        self.push(out, Op::Exp { x })
    }

    /// Sum of all entries as a `[1, 1]` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(out, Op::Sum { x })
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(x);
        if v.len() != rows * cols {
            return Err(dim_err(format!("reshape {:?} to [{rows}, {cols}]", v.dim())));
        }
        let out = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols))
            .expect("element count checked");
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Stacks `steps` copies of `x` along rows (time-major).
    pub fn repeat_time(&mut self, x: Var, steps: usize) -> Result<Var> {
        if steps == 0 {
            return Err(dim_err("repeat_time: zero steps"));
        }
        let v = self.value(x);
        let (n, c) = v.dim();
        let mut out = Array2::zeros((n * steps, c));
        for t in 0..steps {
            out.slice_mut(s![t * n..(t + 1) * n, ..]).assign(v);
        }
        Ok(self.push(out, Op::RepeatTime { x, steps }))
    }

    /// Averages the `steps` time-major row blocks of `x`.
    pub fn mean_time(&mut self, x: Var, steps: usize) -> Result<Var> {
        let (rows, c) = self.shape(x);
        if steps == 0 || rows % steps != 0 {
            return Err(dim_err(format!("mean_time: {rows} rows over {steps} steps")));
        }
        let n = rows / steps;
        let v = self.value(x);
        let mut out = Array2::zeros((n, c));
        for t in 0..steps {
            out += &v.slice(s![t * n..(t + 1) * n, ..]);
        }
        out /= steps as f64;
        Ok(self.push(out, Op::MeanTime { x, steps }))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, _) = self.shape(x);
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(dim_err(format!("select_rows: row {r} of {n}")));
        }
        let out = self.value(x).select(Axis(0), &rows);
        Ok(self.push(out, Op::SelectRows { x, rows }))
    }

    /// Batch normalization over all rows, per column.
    pub fn batch_norm(
        &mut self,
        x: Var,
        store: &ParamStore,
        state: &mut BatchNormState,
        training: bool,
    ) -> Result<Var> {
        let (n, c) = self.shape(x);
        if c != state.channels() {
            return Err(dim_err(format!("batch_norm: {c} channels, state has {}", state.channels())));
        }
        if n == 0 {
            return Err(Error::Numeric("batch_norm on an empty batch".into()));
        }
        let gamma = self.param(store, state.gamma);
        let beta = self.param(store, state.beta);
        let xv = self.value(x).as_standard_layout();
        let xs = xv.as_slice().expect("standard layout");
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            for row in xs.chunks_exact(c) {
                mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; c];
            for row in xs.chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            (Array1::from(mean), Array1::from(var))
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std = var.mapv(|v| 1.0 / (v + state.eps).sqrt());
        let gam = self.value(gamma).row(0);
        let bet = self.value(beta).row(0);
        let mut xhat = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for row in xs.chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * gam[j] + bet[j]);
            }
        }
        let xhat = Array2::from_shape_vec((n, c), xhat).expect("sized");
        let out = Array2::from_shape_vec((n, c), out).expect("sized");
        if training {
            state.update_running(&mean, &var, n);
        }
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, training }))
    }

    /// LIF spike layer over time-major rows: `x` holds `steps` blocks of
    /// input currents. The output is binary.
    pub fn spike(&mut self, x: Var, steps: usize, params: LifParams, surrogate: Surrogate) -> Result<Var> {
        let (rows, c) = self.shape(x);
        if steps == 0 || rows % steps != 0 {
            return Err(dim_err(format!("spike: {rows} rows over {steps} steps")));
        }
        let n = rows / steps;
        let xv = self.value(x).as_standard_layout();
        let xs = xv.as_slice().expect("standard layout");
        let mut charge = Vec::with_capacity(rows * c);
        let mut out = Vec::with_capacity(rows * c);
        let mut u = vec![params.u_reset; n * c];
        for block in xs.chunks_exact(n * c) {
            for (u, &i) in u.iter_mut().zip(block) {
                let h = params.charge(*u, i);
                charge.push(h);
                if params.fires(h) {
                    out.push(1.0);
                    *u = params.u_reset;
                } else {
                    out.push(0.0);
                    *u = h;
                }
            }
        }
        let charge = Array2::from_shape_vec((rows, c), charge).expect("sized");
        let out = Array2::from_shape_vec((rows, c), out).expect("sized");
        Ok(self.push(out, Op::Spike { x, steps, charge, params, surrogate }))
    }

    /// `sigma * M * V` per slice, where `M` is the scheme's score map between
    /// the binarized `q` and `k`. `sigma` is a `[1, 1]` node.
    pub fn spiking_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        sigma: Var,
        scheme: &PositionalScheme,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let (rows, d) = self.shape(q);
        if self.shape(k) != (rows, d) || self.shape(v) != (rows, d) {
            return Err(dim_err("attention: q, k, v shapes differ"));
        }
        if rows != spec.slices * spec.len {
            return Err(dim_err(format!("attention: {rows} rows for {} x {}", spec.slices, spec.len)));
        }
        if self.shape(sigma) != (1, 1) {
            return Err(dim_err("attention: sigma must be a scalar"));
        }
        let to_spikes = |m: &Array2<f64>| {
            let cube = m.view().into_shape_with_order((spec.slices, spec.len, d)).expect("rows checked");
            SpikeTensor::from_real(cube)
        };
        let qs = to_spikes(self.value(q));
        let ks = to_spikes(self.value(k));
        let scores = scheme.scores(&qs, &ks)?;
        let sig = self.value(sigma)[[0, 0]];
        let vv = self.value(v);
        let mut out = Array2::zeros((rows, d));
        for sl in 0..spec.slices {
            let r = sl * spec.len..(sl + 1) * spec.len;
            let prod = scores.index_axis(Axis(0), sl).dot(&vv.slice(s![r.clone(), ..]));
            out.slice_mut(s![r, ..]).assign(&(prod * sig));
        }
        let xnor = scheme.is_xnor();
        Ok(self.push(out, Op::Attention { q, k, v, sigma, spec, scores, xnor }))
    }

    /// Score maps recorded by a [`Tape::spiking_attention`] node.
    pub fn attention_scores(&self, v: Var) -> Option<&Array3<f64>> {
        match &self.nodes[v.0].op {
            Op::Attention { scores, .. } => Some(scores),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy of `logits` rows against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(logits);
        if targets.len() != n {
            return Err(dim_err(format!("cross entropy: {} targets for {n} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(dim_err(format!("cross entropy: class {t} of {c}")));
        }
        let lv = self.value(logits);
        let mut probs = Array2::zeros((n, c));
        let mut loss = 0.0;
        for (i, row) in lv.outer_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                probs[[i, j]] = e;
                z += e;
            }
            probs.row_mut(i).mapv_inplace(|p| p / z);
            loss -= (row[targets[i]] - m) - z.ln();
        }
        let out = Array2::from_elem((1, 1), loss / n as f64);
        Ok(self.push(out, Op::SoftmaxXent { logits, probs, targets: targets.to_vec() }))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: Array2<f64>) -> Result<Var> {
        if self.shape(pred) != target.dim() {
            return Err(dim_err(format!("mse: {:?} vs {:?}", self.shape(pred), target.dim())));
        }
        let diff = self.value(pred) - &target;
        let out = Array2::from_elem((1, 1), diff.mapv(|d| d * d).mean().unwrap_or(0.0));
        Ok(self.push(out, Op::Mse { pred, target }))
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Grads {
        self.backward_with(root, Array2::ones(self.nodes[root.0].value.raw_dim()))
    }

    pub fn backward_with(&self, root: Var, seed: Array2<f64>) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { x, w } => {
                add_into(&mut grads[x.0], g.dot(&self.value(*w).t()));
                add_into(&mut grads[w.0], self.value(*x).t().dot(g));
            }
            Op::Add { a, b } => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], g.clone());
            }
            Op::AddRow { x, row } => {
                add_into(&mut grads[x.0], g.clone());
                add_into(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul { a, b } => {
                add_into(&mut grads[a.0], g * self.value(*b));
                add_into(&mut grads[b.0], g * self.value(*a));
            }
            Op::Scale { x, c } => add_into(&mut grads[x.0], g * *c),
            Op::Exp { x } => add_into(&mut grads[x.0], g * &node.value),
            Op::Sum { x } => {
                let gv = g[[0, 0]];
                add_into(&mut grads[x.0], Array2::from_elem(self.nodes[x.0].value.raw_dim(), gv));
            }
            Op::Reshape { x } => {
                let dim = self.nodes[x.0].value.raw_dim();
                let back = g.as_standard_layout().into_owned().into_shape_with_order(dim).expect("same count");
                add_into(&mut grads[x.0], back);
            }
            Op::RepeatTime { x, steps } => {
                let n = g.nrows() / steps;
                let mut acc = Array2::zeros((n, g.ncols()));
                for t in 0..*steps {
                    acc += &g.slice(s![t * n..(t + 1) * n, ..]);
                }
                add_into(&mut grads[x.0], acc);
            }
            Op::MeanTime { x, steps } => {
                let n = g.nrows();
                let mut back = Array2::zeros((n * steps, g.ncols()));
                let scaled = g / *steps as f64;
                for t in 0..*steps {
                    back.slice_mut(s![t * n..(t + 1) * n, ..]).assign(&scaled);
                }
                add_into(&mut grads[x.0], back);
            }
            Op::SelectRows { x, rows } => {
                let mut back = Array2::zeros(self.nodes[x.0].value.raw_dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = back.row_mut(r);
                    dst += &g.row(i);
                }
                add_into(&mut grads[x.0], back);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let (n, c) = g.dim();
                let gam = self.value(*gamma).row(0);
                let g = g.as_standard_layout();
                let gs = g.as_slice().expect("standard layout");
                let hs = xhat.as_slice().expect("standard layout");
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grow, hrow) in gs.chunks_exact(c).zip(hs.chunks_exact(c)) {
                    for j in 0..c {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                let mut dx = Vec::with_capacity(n * c);
                if *training {
                    // dx = inv_std / n * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat)),
                    // with dxhat = g * gamma, so both sums follow from dbeta and dgamma.
                    let nf = n as f64;
                    for (grow, hrow) in gs.chunks_exact(c).zip(hs.chunks_exact(c)) {
                        for j in 0..c {
                            let v = gam[j] * (nf * grow[j] - dbeta[j] - hrow[j] * dgamma[j]);
                            dx.push(v * inv_std[j] / nf);
                        }
                    }
                } else {
                    for grow in gs.chunks_exact(c) {
                        for j in 0..c {
                            dx.push(grow[j] * gam[j] * inv_std[j]);
                        }
                    }
                }
                add_into(&mut grads[x.0], Array2::from_shape_vec((n, c), dx).expect("sized"));
                add_into(&mut grads[gamma.0], Array2::from_shape_vec((1, c), dgamma).expect("sized"));
                add_into(&mut grads[beta.0], Array2::from_shape_vec((1, c), dbeta).expect("sized"));
            }
            Op::Spike { x, steps, charge, params, surrogate } => {
                add_into(&mut grads[x.0], spike_backward(g, &node.value, charge, *steps, params, surrogate));
            }
            Op::Attention { q, k, v, sigma, spec, scores, xnor } => {
                let sig = self.value(*sigma)[[0, 0]];
                let d = g.ncols();
                let rows = g.nrows();
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let mut dq = Array2::zeros((rows, d));
                let mut dk = Array2::zeros((rows, d));
                let mut dv = Array2::zeros((rows, d));
                let mut dsig = 0.0;
                for sl in 0..spec.slices {
                    let r = sl * spec.len..(sl + 1) * spec.len;
                    let gs = g.slice(s![r.clone(), ..]);
                    let m = scores.index_axis(Axis(0), sl);
                    let vs = vv.slice(s![r.clone(), ..]);
                    dsig += (&gs * &m.dot(&vs)).sum();
                    dv.slice_mut(s![r.clone(), ..]).assign(&(m.t().dot(&gs) * sig));
                    let dm = gs.dot(&vs.t()) * sig;
                    let qs = qv.slice(s![r.clone(), ..]);
                    let ks = kv.slice(s![r.clone(), ..]);
                    // d/dq of sum(1 - q - k + 2qk) is (2k - 1); of qk it is k.
                    let (kq, qk) = if *xnor {
                        (ks.mapv(|b| 2.0 * b - 1.0), qs.mapv(|b| 2.0 * b - 1.0))
                    } else {
                        (ks.to_owned(), qs.to_owned())
                    };
                    dq.slice_mut(s![r.clone(), ..]).assign(&dm.dot(&kq));
                    dk.slice_mut(s![r, ..]).assign(&dm.t().dot(&qk));
                }
                add_into(&mut grads[q.0], dq);
                add_into(&mut grads[k.0], dk);
                add_into(&mut grads[v.0], dv);
                add_into(&mut grads[sigma.0], Array2::from_elem((1, 1), dsig));
            }
            Op::SoftmaxXent { logits, probs, targets } => {
                let n = probs.nrows() as f64;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[[i, t]] -= 1.0;
                }
                d *= g[[0, 0]] / n;
                add_into(&mut grads[logits.0], d);
            }
            Op::Mse { pred, target } => {
                let n = target.len().max(1) as f64;
                let d = (self.value(*pred) - target) * (2.0 * g[[0, 0]] / n);
                add_into(&mut grads[pred.0], d);
            }
        }
    }

    /// Adds the gradients of every bound leaf into its stored tensor.
    pub fn accumulate(&self, grads: &Grads, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads.get(i).and_then(Option::as_ref)) {
                store.get_mut(id).accumulate(g)?;
            }
        }
        Ok(())
    }
}

/// Backpropagation through time for the LIF recurrence.
///
/// With `H_t = U_{t-1} + (I_t - (U_{t-1} - u_reset)) / tau` and
/// `U_t = H_t (1 - S_t) + u_reset S_t`, the membrane carries gradient
/// `dU_{t-1} = dH_t (1 - 1/tau)`. The reset path is treated as constant, so
/// `dH_t = dS_t * surrogate(H_t - u_thr) + dU_t (1 - S_t)`.
fn spike_backward(
    g: &Array2<f64>,
    spikes: &Array2<f64>,
    charge: &Array2<f64>,
    steps: usize,
    params: &LifParams,
    surrogate: &Surrogate,
) -> Array2<f64> {
    let (rows, c) = g.dim();
    let n = rows / steps;
    let decay = 1.0 - 1.0 / params.tau;
    let inv_tau = 1.0 / params.tau;
    let g = g.as_standard_layout();
    let (gs, ss, hs) = (
        g.as_slice().expect("standard layout"),
        spikes.as_slice().expect("standard layout"),
        charge.as_slice().expect("standard layout"),
    );
    let mut dx = vec![0.0; rows * c];
    let mut du = vec![0.0; n * c];
    let blk = n * c;
    for t in (0..steps).rev() {
        let r = t * blk..(t + 1) * blk;
        for ((((dx, du), &g), &s), &h) in
            dx[r.clone()].iter_mut().zip(du.iter_mut()).zip(&gs[r.clone()]).zip(&ss[r.clone()]).zip(&hs[r])
        {
            let dh = g * surrogate.grad(h - params.u_thr) + *du * (1.0 - s);
            *dx = dh * inv_tau;
            *du = dh * decay;
        }
    }
    Array2::from_shape_vec((rows, c), dx).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DiffTensor;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn linear_examples() {
        let mut store = ParamStore::new();
        let w = store.insert("w", DiffTensor::from_matrix(array![[1.0], [1.0]], true));
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0]]);
        let wv = tape.param(&store, w);
        let y = tape.linear(x, wv).unwrap();
        assert_eq!(tape.value(y), &array![[3.0]]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        tape.accumulate(&grads, &mut store).unwrap();
        assert_eq!(store.get(w).grad_matrix(), array![[1.0], [2.0]]);
    }

    #[test]
    fn linear_identity_and_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, -2.0, 3.5]]);
        let eye = tape.constant(Array2::eye(3));
        let y = tape.linear(x, eye).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let bad = tape.constant(Array2::eye(2));
        assert!(matches!(tape.linear(x, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut store = ParamStore::new();
        let w = store.insert("w", DiffTensor::from_matrix(array![[2.0]], true));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let x = tape.constant(array![[3.0]]);
        let a = tape.linear(x, wv).unwrap();
        let b = tape.linear(x, wv).unwrap();
        let y = tape.add(a, b).unwrap();
        let grads = tape.backward(y);
        tape.accumulate(&grads, &mut store).unwrap();
        tape.accumulate(&grads, &mut store).unwrap();
        assert_eq!(store.get(w).grad_matrix(), array![[12.0]]);
    }

    fn bn_fixture(x: Array2<f64>) -> (Tape, Var, ParamStore, BatchNormState) {
        let mut store = ParamStore::new();
        let state = BatchNormState::new(&mut store, "bn", x.ncols());
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        (tape, xv, store, state)
    }

    #[test]
    fn batch_norm_constant_input_is_zero() {
        let (mut tape, x, store, mut state) = bn_fixture(Array2::from_elem((4, 2), 7.0));
        let y = tape.batch_norm(x, &store, &mut state, true).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        let (mut tape, x, mut store, mut state) = bn_fixture(array![[1.0, 5.0], [3.0, -2.0], [0.5, 0.0]]);
        store.get_mut(state.gamma).values.fill(0.0);
        store.get_mut(state.beta).values = ndarray::arr1(&[0.25, -1.5]).into_dyn();
        let y = tape.batch_norm(x, &store, &mut state, true).unwrap();
        for row in tape.value(y).outer_iter() {
            assert_eq!(row.to_vec(), vec![0.25, -1.5]);
        }
    }

    #[test]
    fn batch_norm_two_samples() {
        let (mut tape, x, store, mut state) = bn_fixture(array![[0.0], [2.0]]);
        let y = tape.batch_norm(x, &store, &mut state, true).unwrap();
        let expected = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert_abs_diff_eq!(tape.value(y)[[0, 0]], -expected, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(y)[[1, 0]], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(state.running_mean[0], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(state.running_var[0], 0.9 + 0.1 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn batch_norm_errors() {
        let (mut tape, x, store, mut state) = bn_fixture(Array2::zeros((0, 2)));
        assert!(matches!(tape.batch_norm(x, &store, &mut state, true), Err(Error::Numeric(_))));
        let (mut tape, x, store, mut state) = bn_fixture(Array2::zeros((2, 2)));
        state.running_mean = Array1::zeros(3);
        assert!(matches!(tape.batch_norm(x, &store, &mut state, true), Err(Error::Dimension(_))));
    }

    #[test]
    fn spike_layer_examples() {
        let params = LifParams::default();
        let sur = Surrogate::default();
        let mut tape = Tape::new();
        let big = tape.constant(Array2::from_elem((4 * 3, 2), 10.0));
        let s = tape.spike(big, 4, params, sur).unwrap();
        assert!(tape.value(s).iter().all(|&v| v == 1.0));

        let zero = tape.constant(Array2::zeros((4 * 3, 2)));
        let s = tape.spike(zero, 4, params, sur).unwrap();
        assert!(tape.value(s).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spike_surrogate_at_threshold() {
        // Single step from rest: H = I / tau, so I = 2 puts H exactly on u_thr.
        let params = LifParams::default();
        let sur = Surrogate::default();
        let mut tape = Tape::new();
        let x = tape.constant(array![[2.0]]);
        let s = tape.spike(x, 1, params, sur).unwrap();
        assert_eq!(tape.value(s)[[0, 0]], 1.0);
        let grads = tape.backward(s);
        // dS/dH = alpha / 2, dH/dI = 1 / tau.
        assert_abs_diff_eq!(grads.get(x).unwrap()[[0, 0]], sur.alpha / 2.0 / params.tau, epsilon = 1e-15);
    }

    #[test]
    fn spike_bptt_matches_manual_unroll() {
        let params = LifParams::default();
        let sur = Surrogate::default();
        let mut tape = Tape::new();
        // One neuron, two steps, sub-threshold at t = 0.
        let x = tape.constant(array![[0.5], [1.0]]);
        let s = tape.spike(x, 2, params, sur).unwrap();
        let grads = tape.backward(s);
        let h0 = 0.25;
        let h1 = h0 + (1.0 - h0) / 2.0;
        let sg1 = sur.grad(h1 - 1.0);
        let sg0 = sur.grad(h0 - 1.0);
        let d1 = sg1 / 2.0;
        let d0 = (sg0 + sg1 * 0.5) / 2.0;
        let g = grads.get(x).unwrap();
        assert_abs_diff_eq!(g[[1, 0]], d1, epsilon = 1e-15);
        assert_abs_diff_eq!(g[[0, 0]], d0, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_and_mse() {
        let mut tape = Tape::new();
        let logits = tape.constant(array![[0.0, 0.0], [1.0, 1.0]]);
        let l = tape.softmax_cross_entropy(logits, &[0, 1]).unwrap();
        assert_abs_diff_eq!(tape.value(l)[[0, 0]], 2f64.ln(), epsilon = 1e-12);
        let grads = tape.backward(l);
        assert_abs_diff_eq!(grads.get(logits).unwrap()[[0, 0]], -0.25, epsilon = 1e-12);

        let p = tape.constant(array![[1.0, 3.0]]);
        let m = tape.mse(p, array![[0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(tape.value(m)[[0, 0]], 2.5, epsilon = 1e-12);
    }
}
