use super::sigmoid;
use crate::error::{Error, Result};

/// `out += W x` for a row-major `rows x cols` matrix.
pub(crate) fn matvec_acc(w: &[f32], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (row, o) in w.chunks_exact(cols).zip(out.iter_mut()) {
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x) {
            acc += f64::from(*wv) * xv;
        }
        *o += acc;
    }
}

/// `dx += W^T dy`.
pub(crate) fn matvec_t_acc(w: &[f32], cols: usize, dy: &[f64], dx: &mut [f64]) {
    for (row, g) in w.chunks_exact(cols).zip(dy) {
        if *g == 0.0 {
            continue;
        }
        for (d, wv) in dx.iter_mut().zip(row) {
            *d += f64::from(*wv) * g;
        }
    }
}

/// `gw += dy x^T`.
pub(crate) fn outer_acc(gw: &mut [f64], cols: usize, dy: &[f64], x: &[f64]) {
    for (row, g) in gw.chunks_exact_mut(cols).zip(dy) {
        if *g == 0.0 {
            continue;
        }
        for (d, xv) in row.iter_mut().zip(x) {
            *d += g * xv;
        }
    }
}

/// Weight matrix `W` (`rows x cols`, row-major) and bias `b` (`rows`).
#[derive(Debug, Clone, Copy)]
pub struct LayerParams<'a> {
    pub w: &'a [f32],
    pub b: &'a [f32],
    pub rows: usize,
    pub cols: usize,
}

impl<'a> LayerParams<'a> {
    pub fn new(w: &'a [f32], b: &'a [f32], rows: usize, cols: usize) -> Result<Self> {
        if w.len() != rows * cols || b.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "layer {rows}x{cols} given {} weights and {} biases",
                w.len(),
                b.len()
            )));
        }
        Ok(Self { w, b, rows, cols })
    }

    /// `W x + b`.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.b.iter().map(|&v| f64::from(v)).collect();
        matvec_acc(self.w, self.rows, self.cols, x, &mut out);
        out
    }

    fn expect_input(&self, len: usize) -> Result<()> {
        if len != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "layer expects input of length {}, got {len}",
                self.cols
            )));
        }
        Ok(())
    }

    /// Accumulate parameter gradients for an affine map evaluated at `x`
    /// with output gradient `dy`, and return `W^T dy`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: DenseGrad<'_>) -> Vec<f64> {
        outer_acc(grad.w, self.cols, dy, x);
        for (g, d) in grad.b.iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![0.0; self.cols];
        matvec_t_acc(self.w, self.cols, dy, &mut dx);
        dx
    }
}

/// Mutable gradient slices for one [`LayerParams`].
#[derive(Debug)]
pub struct DenseGrad<'a> {
    pub w: &'a mut [f64],
    pub b: &'a mut [f64],
}

pub fn dense_forward(p: &LayerParams<'_>, input: &[f64]) -> Result<Vec<f64>> {
    p.expect_input(input.len())?;
    Ok(p.affine(input))
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Cache of one plain recurrent step `h' = tanh(W [h, x] + b)`.
#[derive(Debug, Clone)]
pub struct RnnCache {
    pub input: Vec<f64>,
    pub h: Vec<f64>,
}

impl<'a> LayerParams<'a> {
    pub fn rnn_step(&self, h_prev: &[f64], x: &[f64]) -> Result<RnnCache> {
        if h_prev.len() != self.rows {
            return Err(Error::ShapeMismatch(format!(
                "hidden state of length {} for a {}-unit cell",
                h_prev.len(),
                self.rows
            )));
        }
        self.expect_input(h_prev.len() + x.len())?;
        let input = concat(h_prev, x);
        let h = self.affine(&input).into_iter().map(f64::tanh).collect();
        Ok(RnnCache { input, h })
    }

    /// Returns the gradient with respect to the concatenated input `[h_prev, x]`.
    pub fn rnn_backward(&self, cache: &RnnCache, dh: &[f64], grad: DenseGrad<'_>) -> Vec<f64> {
        let da: Vec<f64> = dh.iter().zip(&cache.h).map(|(d, h)| d * (1.0 - h * h)).collect();
        self.backward(&cache.input, &da, grad)
    }
}

pub fn rnn_cell_forward(p: &LayerParams<'_>, h_prev: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    Ok(p.rnn_step(h_prev, x)?.h)
}

/// Gate parameters of a GRU cell; every gate sees `[h_prev, x]`.
#[derive(Debug, Clone, Copy)]
pub struct GruCell<'a> {
    pub reset: LayerParams<'a>,
    pub update: LayerParams<'a>,
    pub candidate: LayerParams<'a>,
}

#[derive(Debug)]
pub struct GruGrad<'a> {
    pub reset: DenseGrad<'a>,
    pub update: DenseGrad<'a>,
    pub candidate: DenseGrad<'a>,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    h_prev: Vec<f64>,
    gate_input: Vec<f64>,
    cand_input: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    cand: Vec<f64>,
    pub h: Vec<f64>,
}

impl<'a> GruCell<'a> {
    pub fn hidden(&self) -> usize {
        self.reset.rows
    }

    /// `r = σ(W_r[h,x]+b_r)`, `z = σ(W_z[h,x]+b_z)`,
    /// `h~ = tanh(W_h[r*h, x]+b_h)`, `h' = (1-z)*h + z*h~`.
    pub fn step(&self, h_prev: &[f64], x: &[f64]) -> Result<GruCache> {
        let d = self.hidden();
        if h_prev.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "hidden state of length {} for a {d}-unit cell",
                h_prev.len()
            )));
        }
        for gate in [&self.reset, &self.update, &self.candidate] {
            if gate.rows != d {
                return Err(Error::ShapeMismatch("GRU gates disagree on hidden size".into()));
            }
            gate.expect_input(d + x.len())?;
        }
        let gate_input = concat(h_prev, x);
        let r: Vec<f64> = self.reset.affine(&gate_input).into_iter().map(sigmoid).collect();
        let z: Vec<f64> = self.update.affine(&gate_input).into_iter().map(sigmoid).collect();
        let mut cand_input = gate_input.clone();
        for (c, rv) in cand_input[..d].iter_mut().zip(&r) {
            *c *= rv;
        }
        let cand: Vec<f64> = self.candidate.affine(&cand_input).into_iter().map(f64::tanh).collect();
        let h = (0..d).map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * cand[i]).collect();
        Ok(GruCache { h_prev: h_prev.to_vec(), gate_input, cand_input, r, z, cand, h })
    }

    /// Returns `(dh_prev, dx)`.
    pub fn backward(&self, cache: &GruCache, dh: &[f64], grad: GruGrad<'_>) -> (Vec<f64>, Vec<f64>) {
        let d = self.hidden();
        let mut dh_prev: Vec<f64> = (0..d).map(|i| dh[i] * (1.0 - cache.z[i])).collect();
        let da_cand: Vec<f64> = (0..d)
            .map(|i| dh[i] * cache.z[i] * (1.0 - cache.cand[i] * cache.cand[i]))
            .collect();
        let da_update: Vec<f64> = (0..d)
            .map(|i| dh[i] * (cache.cand[i] - cache.h_prev[i]) * cache.z[i] * (1.0 - cache.z[i]))
            .collect();
        let d_cand_input = self.candidate.backward(&cache.cand_input, &da_cand, grad.candidate);
        let mut dx = d_cand_input[d..].to_vec();
        let mut da_reset = vec![0.0; d];
        for i in 0..d {
            let d_rh = d_cand_input[i];
            da_reset[i] = d_rh * cache.h_prev[i] * cache.r[i] * (1.0 - cache.r[i]);
            dh_prev[i] += d_rh * cache.r[i];
        }
        let d_gate_u = self.update.backward(&cache.gate_input, &da_update, grad.update);
        let d_gate_r = self.reset.backward(&cache.gate_input, &da_reset, grad.reset);
        for i in 0..d {
            dh_prev[i] += d_gate_u[i] + d_gate_r[i];
        }
        for (j, v) in dx.iter_mut().enumerate() {
            *v += d_gate_u[d + j] + d_gate_r[d + j];
        }
        (dh_prev, dx)
    }
}

pub fn gru_cell_forward(p: &GruCell<'_>, h_prev: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    Ok(p.step(h_prev, x)?.h)
}
