//! Trainable layers with hand-derived backward passes.
//!
//! Every `*_backward` consumes the tape produced by the matching forward call,
//! *accumulates* parameter gradients into the supplied gradient struct (which
//! has the same type as the parameters), and returns the gradient with respect
//! to the layer input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, gemm_nn, gemm_nt, gemm_tn_acc, sigmoid, Matrix, Vector};

/// A fixed, ordered collection of parameter tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut out = self.clone();
        out.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        out
    }

    fn accumulate(&mut self, other: &Self) -> Result<()> {
        let theirs = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(Error::invalid("parameter sets have different tensor counts"));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    fn scale_all(&mut self, s: f64) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(s));
    }

    fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "flat parameter vector has {} values, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

impl Parameters for Matrix {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![self]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![self]
    }
}

/// Weights uniform in `[-k, k]` with `k = sqrt(1 / fan_in)`.
pub fn uniform_init<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix {
    let k = (1.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-k..=k)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

fn add_row_sums(dz: &Matrix, bias_grad: &mut Matrix) {
    for r in 0..dz.rows() {
        axpy(1.0, dz.row(r), bias_grad.row_mut(0));
    }
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

/// One LSTM direction. Gate blocks are stacked in the order input, forget,
/// output, candidate: `w` is `4h × input`, `u` is `4h × h`, `b` is `1 × 4h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmDirection {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Matrix,
}

impl LstmDirection {
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let w = uniform_init(4 * hidden, input, input, rng);
        let u = uniform_init(4 * hidden, hidden, hidden, rng);
        let mut b = Matrix::zeros(1, 4 * hidden);
        b.row_mut(0)[hidden..2 * hidden].fill(1.0);
        LstmDirection { w, u, b }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }
}

impl Parameters for LstmDirection {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.u, &self.b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }
}

/// Single-layer bidirectional LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

impl LstmParams {
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let forward = LstmDirection::init(input, hidden, rng);
        let backward = LstmDirection::init(input, hidden, rng);
        LstmParams { forward, backward }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden()
    }
}

impl Parameters for LstmParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.forward.tensors();
        v.extend(self.backward.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.forward.tensors_mut();
        v.extend(self.backward.tensors_mut());
        v
    }
}

#[derive(Debug)]
struct DirectionTape {
    input: Matrix,
    /// Post-activation gates `[i | f | o | g]`, one row per step.
    gates: Matrix,
    cells: Matrix,
    tanh_cells: Matrix,
    hidden: Matrix,
}

#[derive(Debug)]
pub struct BiLstmTape {
    forward: DirectionTape,
    backward: DirectionTape,
}

impl BiLstmTape {
    pub fn len(&self) -> usize {
        self.forward.input.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn direction_forward(x: Matrix, p: &LstmDirection) -> Result<DirectionTape> {
    let h = p.hidden();
    let steps = x.rows();
    let pre_x = gemm_nt(&x, &p.w)?;
    let mut gates = Matrix::zeros(steps, 4 * h);
    let mut cells = Matrix::zeros(steps, h);
    let mut tanh_cells = Matrix::zeros(steps, h);
    let mut hidden = Matrix::zeros(steps, h);
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut z = vec![0.0; 4 * h];
    for t in 0..steps {
        for (r, zr) in z.iter_mut().enumerate() {
            *zr = pre_x.get(t, r) + p.b.get(0, r) + dot(p.u.row(r), &h_prev);
        }
        let g_row = gates.row_mut(t);
        for j in 0..h {
            g_row[j] = sigmoid(z[j]);
            g_row[h + j] = sigmoid(z[h + j]);
            g_row[2 * h + j] = sigmoid(z[2 * h + j]);
            g_row[3 * h + j] = z[3 * h + j].tanh();
        }
        for j in 0..h {
            let (i, f, o, g) = (g_row[j], g_row[h + j], g_row[2 * h + j], g_row[3 * h + j]);
            let c = f * c_prev[j] + i * g;
            let tc = c.tanh();
            cells.set(t, j, c);
            tanh_cells.set(t, j, tc);
            hidden.set(t, j, o * tc);
            c_prev[j] = c;
            h_prev[j] = o * tc;
        }
    }
    Ok(DirectionTape {
        input: x,
        gates,
        cells,
        tanh_cells,
        hidden,
    })
}

fn direction_backward(
    p: &LstmDirection,
    tape: DirectionTape,
    d_hidden: &Matrix,
    grads: &mut LstmDirection,
) -> Result<Matrix> {
    let h = p.hidden();
    let steps = tape.input.rows();
    if d_hidden.shape() != (steps, h) {
        return Err(Error::Shape {
            op: "lstm_backward",
            left: (steps, h),
            right: d_hidden.shape(),
        });
    }
    let mut dz = Matrix::zeros(steps, 4 * h);
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    for t in (0..steps).rev() {
        let g_row = tape.gates.row(t);
        let mut dh = d_hidden.row(t).to_vec();
        axpy(1.0, &dh_next, &mut dh);
        let dz_row = dz.row_mut(t);
        for j in 0..h {
            let (i, f, o, g) = (g_row[j], g_row[h + j], g_row[2 * h + j], g_row[3 * h + j]);
            let tc = tape.tanh_cells.get(t, j);
            let c_prev = if t > 0 { tape.cells.get(t - 1, j) } else { 0.0 };
            let dc = dh[j] * o * (1.0 - tc * tc) + dc_next[j];
            dz_row[j] = dc * g * i * (1.0 - i);
            dz_row[h + j] = dc * c_prev * f * (1.0 - f);
            dz_row[2 * h + j] = dh[j] * tc * o * (1.0 - o);
            dz_row[3 * h + j] = dc * i * (1.0 - g * g);
            dc_next[j] = dc * f;
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for (r, &d) in dz_row.iter().enumerate() {
            if d != 0.0 {
                axpy(d, p.u.row(r), &mut dh_next);
            }
        }
    }
    let mut h_prev = Matrix::zeros(steps, h);
    for t in 1..steps {
        h_prev.row_mut(t).copy_from_slice(tape.hidden.row(t - 1));
    }
    gemm_tn_acc(&dz, &tape.input, &mut grads.w)?;
    gemm_tn_acc(&dz, &h_prev, &mut grads.u)?;
    add_row_sums(&dz, &mut grads.b);
    gemm_nn(&dz, &p.w)
}

/// Runs both directions over `seq` (`T × input`). Row `t` of the output is
/// `[h_fwd(t) | h_bwd(t)]`, where the backward direction reads the sequence
/// right to left.
pub fn bilstm_forward(seq: &Matrix, p: &LstmParams) -> Result<(Matrix, BiLstmTape)> {
    if seq.rows() == 0 {
        return Err(Error::invalid("bilstm_forward needs at least one time step"));
    }
    if seq.cols() != p.input_dim() {
        return Err(Error::Shape {
            op: "bilstm_forward",
            left: seq.shape(),
            right: p.forward.w.shape(),
        });
    }
    let steps = seq.rows();
    let h = p.hidden();
    let fwd = direction_forward(seq.clone(), &p.forward)?;
    let bwd = direction_forward(seq.reversed_rows(), &p.backward)?;
    let mut out = Matrix::zeros(steps, 2 * h);
    for t in 0..steps {
        let row = out.row_mut(t);
        row[..h].copy_from_slice(fwd.hidden.row(t));
        row[h..].copy_from_slice(bwd.hidden.row(steps - 1 - t));
    }
    Ok((
        out,
        BiLstmTape {
            forward: fwd,
            backward: bwd,
        },
    ))
}

pub fn bilstm_backward(
    p: &LstmParams,
    tape: BiLstmTape,
    d_out: &Matrix,
    grads: &mut LstmParams,
) -> Result<Matrix> {
    let steps = tape.len();
    let h = p.hidden();
    if d_out.shape() != (steps, 2 * h) {
        return Err(Error::Shape {
            op: "bilstm_backward",
            left: (steps, 2 * h),
            right: d_out.shape(),
        });
    }
    let mut d_fwd = Matrix::zeros(steps, h);
    let mut d_bwd = Matrix::zeros(steps, h);
    for t in 0..steps {
        d_fwd.row_mut(t).copy_from_slice(&d_out.row(t)[..h]);
        d_bwd.row_mut(steps - 1 - t).copy_from_slice(&d_out.row(t)[h..]);
    }
    let mut dx = direction_backward(&p.forward, tape.forward, &d_fwd, &mut grads.forward)?;
    let dx_rev = direction_backward(&p.backward, tape.backward, &d_bwd, &mut grads.backward)?;
    dx.add_assign(&dx_rev.reversed_rows())?;
    Ok(dx)
}

/// `[h_fwd(T-1) | h_bwd(0)]`: the last state each direction produced.
pub fn final_states(h_seq: &Matrix) -> Vector {
    let h = h_seq.cols() / 2;
    let mut v = Vec::with_capacity(2 * h);
    v.extend_from_slice(&h_seq.row(h_seq.rows() - 1)[..h]);
    v.extend_from_slice(&h_seq.row(0)[h..]);
    v.into()
}

/// Scatters a gradient on [`final_states`] back onto the full output sequence.
pub fn final_states_backward(steps: usize, d_final: &[f64]) -> Matrix {
    let h = d_final.len() / 2;
    let mut d = Matrix::zeros(steps, 2 * h);
    d.row_mut(steps - 1)[..h].copy_from_slice(&d_final[..h]);
    d.row_mut(0)[h..].copy_from_slice(&d_final[h..]);
    d
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// One kernel size of the convolution bank. `w` is `features × (kernel_size · input)`
/// with each row laid out window-position-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel_size: usize,
    pub w: Matrix,
    pub b: Matrix,
}

impl ConvParams {
    pub fn init<R: Rng>(kernel_size: usize, input: usize, features: usize, rng: &mut R) -> Self {
        let fan_in = kernel_size * input;
        ConvParams {
            kernel_size,
            w: uniform_init(features, fan_in, fan_in, rng),
            b: Matrix::zeros(1, features),
        }
    }

    pub fn features(&self) -> usize {
        self.w.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols() / self.kernel_size
    }
}

impl Parameters for ConvParams {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug)]
pub struct ConvTape {
    input_rows: usize,
    input_cols: usize,
    windows: Matrix,
    pre_activation: Matrix,
}

/// Valid 1-D convolution followed by ReLU: output is `(T - l + 1) × features`.
pub fn conv1d_forward(x: &Matrix, p: &ConvParams) -> Result<(Matrix, ConvTape)> {
    let l = p.kernel_size;
    let d = x.cols();
    if l == 0 || d * l != p.w.cols() {
        return Err(Error::Shape {
            op: "conv1d_forward",
            left: x.shape(),
            right: p.w.shape(),
        });
    }
    if x.rows() < l {
        return Err(Error::invalid(format!(
            "sequence of length {} is shorter than kernel size {l}",
            x.rows()
        )));
    }
    let positions = x.rows() - l + 1;
    let mut windows = Matrix::zeros(positions, l * d);
    for pos in 0..positions {
        windows
            .row_mut(pos)
            .copy_from_slice(&x.data()[pos * d..(pos + l) * d]);
    }
    let mut pre = gemm_nt(&windows, &p.w)?;
    for pos in 0..positions {
        axpy(1.0, p.b.row(0), pre.row_mut(pos));
    }
    let mut out = pre.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok((
        out,
        ConvTape {
            input_rows: x.rows(),
            input_cols: d,
            windows,
            pre_activation: pre,
        },
    ))
}

pub fn conv1d_backward(
    p: &ConvParams,
    tape: ConvTape,
    d_out: &Matrix,
    grads: &mut ConvParams,
) -> Result<Matrix> {
    if d_out.shape() != tape.pre_activation.shape() {
        return Err(Error::Shape {
            op: "conv1d_backward",
            left: tape.pre_activation.shape(),
            right: d_out.shape(),
        });
    }
    let mut dz = d_out.clone();
    for (g, z) in dz.data_mut().iter_mut().zip(tape.pre_activation.data()) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    gemm_tn_acc(&dz, &tape.windows, &mut grads.w)?;
    add_row_sums(&dz, &mut grads.b);
    let d_windows = gemm_nn(&dz, &p.w)?;
    let d = tape.input_cols;
    let l = p.kernel_size;
    let mut dx = Matrix::zeros(tape.input_rows, d);
    for pos in 0..d_windows.rows() {
        axpy(
            1.0,
            d_windows.row(pos),
            &mut dx.data_mut()[pos * d..(pos + l) * d],
        );
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Pooling, dropout, dense
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PoolTape {
    rows: usize,
    argmax: Vec<usize>,
}

impl PoolTape {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Column-wise maximum; ties go to the earliest row.
pub fn max_over_time(c: &Matrix) -> Result<(Vector, PoolTape)> {
    if c.rows() == 0 {
        return Err(Error::invalid("max_over_time of an empty sequence"));
    }
    let mut best = c.row(0).to_vec();
    let mut argmax = vec![0; c.cols()];
    for r in 1..c.rows() {
        for (j, &v) in c.row(r).iter().enumerate() {
            if v > best[j] {
                best[j] = v;
                argmax[j] = r;
            }
        }
    }
    Ok((
        best.into(),
        PoolTape {
            rows: c.rows(),
            argmax,
        },
    ))
}

pub fn max_over_time_backward(tape: PoolTape, d_out: &[f64]) -> Result<Matrix> {
    if d_out.len() != tape.argmax.len() {
        return Err(Error::Shape {
            op: "max_over_time_backward",
            left: (1, tape.argmax.len()),
            right: (1, d_out.len()),
        });
    }
    let mut d = Matrix::zeros(tape.rows, d_out.len());
    for (j, (&r, &g)) in tape.argmax.iter().zip(d_out).enumerate() {
        d.set(r, j, g);
    }
    Ok(d)
}

/// Per-component multipliers: 0 for dropped units, `1 / (1 - rate)` for survivors.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(Vec<f64>);

impl DropoutMask {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn apply(&self, d: &[f64]) -> Vector {
        d.iter().zip(&self.0).map(|(a, m)| a * m).collect::<Vec<_>>().into()
    }
}

/// Inverted dropout. With `training == false` (or `rate == 0`) this is the identity.
pub fn dropout<R: Rng>(
    v: &[f64],
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Vector, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let mask: Vec<f64> = if training && rate > 0.0 {
        let keep = 1.0 / (1.0 - rate);
        (0..v.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect()
    } else {
        vec![1.0; v.len()]
    };
    let mask = DropoutMask(mask);
    Ok((mask.apply(v), mask))
}

/// Affine layer `y = W v + b` with `w` as `out × in` and `b` as `1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub w: Matrix,
    pub b: Matrix,
}

impl DenseParams {
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        DenseParams {
            w: uniform_init(output, input, input, rng),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }
}

impl Parameters for DenseParams {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }
}

pub fn dense_forward(v: &[f64], p: &DenseParams) -> Result<Vector> {
    let mut y = p.w.matvec(v).map_err(|_| Error::Shape {
        op: "dense_forward",
        left: p.w.shape(),
        right: (v.len(), 1),
    })?;
    axpy(1.0, p.b.row(0), &mut y);
    Ok(y)
}

/// `input` is the vector the forward pass saw.
pub fn dense_backward(
    p: &DenseParams,
    input: &[f64],
    d_out: &[f64],
    grads: &mut DenseParams,
) -> Result<Vector> {
    if d_out.len() != p.output_dim() || input.len() != p.input_dim() {
        return Err(Error::Shape {
            op: "dense_backward",
            left: p.w.shape(),
            right: (d_out.len(), input.len()),
        });
    }
    let mut dv = vec![0.0; input.len()];
    for (r, &g) in d_out.iter().enumerate() {
        if g != 0.0 {
            axpy(g, input, grads.w.row_mut(r));
            axpy(g, p.w.row(r), &mut dv);
        }
    }
    axpy(1.0, d_out, grads.b.row_mut(0));
    Ok(dv.into())
}
