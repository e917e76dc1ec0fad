//! Gated recurrent unit layer with full backpropagation through time.
//!
//! Gate equations: z = sigmoid(Wz x + Uz h + bz), r likewise, candidate
//! h~ = tanh(Wh x + Uh (r*h) + bh), next state h' = (1-z)*h + z*h~.

use crate::error::{Error, Result};
use crate::nn::layers::{dims2, sigmoid};
use crate::nn::tensor::Tensor;

/// Borrowed views of the nine parameter tensors of one GRU layer.
/// W* are H x D, U* are H x H, b* are H.
pub struct GruWeights<'a> {
    pub wz: &'a Tensor,
    pub uz: &'a Tensor,
    pub bz: &'a Tensor,
    pub wr: &'a Tensor,
    pub ur: &'a Tensor,
    pub br: &'a Tensor,
    pub wh: &'a Tensor,
    pub uh: &'a Tensor,
    pub bh: &'a Tensor,
}

/// Gradients for the nine parameter tensors, in the same layout.
pub struct GruGrads {
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wh: Tensor,
    pub uh: Tensor,
    pub bh: Tensor,
}

/// Per-sequence activations kept for the backward pass.
pub struct GruCache {
    t: usize,
    d: usize,
    /// Inputs, T x D.
    xs: Vec<f64>,
    /// States h_0..h_T, (T+1) x H; h_0 is zeros.
    hs: Vec<f64>,
    zs: Vec<f64>,
    rs: Vec<f64>,
    /// Candidate activations (tanh outputs), T x H.
    gs: Vec<f64>,
}

impl<'a> GruWeights<'a> {
    fn dims(&self) -> Result<(usize, usize)> {
        let (h, d) = dims2(self.wz, "gru wz")?;
        let same_hd = [self.wr, self.wh];
        for w in same_hd {
            if w.shape() != [h, d] {
                return Err(Error::shape("gru input weight shapes disagree"));
            }
        }
        for u in [self.uz, self.ur, self.uh] {
            if u.shape() != [h, h] {
                return Err(Error::shape("gru recurrent weight shapes disagree"));
            }
        }
        for b in [self.bz, self.br, self.bh] {
            if b.shape() != [h] {
                return Err(Error::shape("gru bias shapes disagree"));
            }
        }
        Ok((h, d))
    }
}

/// out[i] += W[i,:] . x  for an H x D row-major matrix.
fn matvec_acc(w: &[f64], h: usize, d: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), h * d);
    debug_assert_eq!(x.len(), d);
    debug_assert_eq!(out.len(), h);
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x.iter()) {
            acc += wv * xv;
        }
        *o += acc;
    }
}

/// out[j] += sum_i W[i,j] * g[i]  (transpose application).
fn matvec_t_acc(w: &[f64], h: usize, d: usize, g: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), h * d);
    debug_assert_eq!(g.len(), h);
    debug_assert_eq!(out.len(), d);
    for (i, gi) in g.iter().enumerate() {
        if *gi == 0.0 {
            continue;
        }
        let row = &w[i * d..(i + 1) * d];
        for (o, wv) in out.iter_mut().zip(row.iter()) {
            *o += gi * wv;
        }
    }
}

/// dW[i,j] += g[i] * x[j]  (outer product accumulation).
fn outer_acc(dw: &mut [f64], h: usize, d: usize, g: &[f64], x: &[f64]) {
    debug_assert_eq!(dw.len(), h * d);
    for i in 0..h {
        let gi = g[i];
        if gi == 0.0 {
            continue;
        }
        let row = &mut dw[i * d..(i + 1) * d];
        for (o, xv) in row.iter_mut().zip(x.iter()) {
            *o += gi * xv;
        }
    }
}

/// Run the layer over a T x D input sequence from a zero initial state.
/// Returns the T x H output sequence and the cache for BPTT.
pub fn gru_forward(w: &GruWeights, inputs: &Tensor) -> Result<(Tensor, GruCache)> {
    let (h, d) = w.dims()?;
    let (t_len, in_d) = dims2(inputs, "gru inputs")?;
    if in_d != d {
        return Err(Error::shape(format!(
            "gru expects input dim {d}, got {in_d}"
        )));
    }
    let mut cache = GruCache {
        t: t_len,
        d,
        xs: inputs.data().to_vec(),
        hs: vec![0.0; (t_len + 1) * h],
        zs: vec![0.0; t_len * h],
        rs: vec![0.0; t_len * h],
        gs: vec![0.0; t_len * h],
    };
    let mut outputs = Tensor::zeros(&[t_len, h]);
    let mut az = vec![0.0; h];
    let mut ar = vec![0.0; h];
    let mut ah = vec![0.0; h];
    let mut rh = vec![0.0; h];
    for t in 0..t_len {
        let x = &cache.xs[t * d..(t + 1) * d];
        let (h_prev_range, rest) = cache.hs.split_at_mut((t + 1) * h);
        let h_prev = &h_prev_range[t * h..];
        let h_next = &mut rest[..h];

        az.copy_from_slice(w.bz.data());
        matvec_acc(w.wz.data(), h, d, x, &mut az);
        matvec_acc(w.uz.data(), h, h, h_prev, &mut az);
        ar.copy_from_slice(w.br.data());
        matvec_acc(w.wr.data(), h, d, x, &mut ar);
        matvec_acc(w.ur.data(), h, h, h_prev, &mut ar);

        let zs = &mut cache.zs[t * h..(t + 1) * h];
        let rs = &mut cache.rs[t * h..(t + 1) * h];
        for i in 0..h {
            zs[i] = sigmoid(az[i]);
            rs[i] = sigmoid(ar[i]);
            rh[i] = rs[i] * h_prev[i];
        }

        ah.copy_from_slice(w.bh.data());
        matvec_acc(w.wh.data(), h, d, x, &mut ah);
        matvec_acc(w.uh.data(), h, h, &rh, &mut ah);

        let gs = &mut cache.gs[t * h..(t + 1) * h];
        for i in 0..h {
            gs[i] = ah[i].tanh();
            h_next[i] = (1.0 - zs[i]) * h_prev[i] + zs[i] * gs[i];
        }
        outputs.row_mut(t).copy_from_slice(h_next);
    }
    outputs.assert_finite("gru output")?;
    Ok((outputs, cache))
}

/// Backward through time. `grad_out` is T x H (gradient w.r.t. every output
/// state). Returns parameter gradients and the T x D input gradient.
pub fn gru_backward(
    w: &GruWeights,
    cache: &GruCache,
    grad_out: &Tensor,
) -> Result<(GruGrads, Tensor)> {
    let (h, d) = w.dims()?;
    let (t_len, _) = (cache.t, cache.d);
    if grad_out.shape() != [t_len, h] {
        return Err(Error::shape("gru grad_out shape"));
    }
    let mut grads = GruGrads {
        wz: Tensor::zeros(&[h, d]),
        uz: Tensor::zeros(&[h, h]),
        bz: Tensor::zeros(&[h]),
        wr: Tensor::zeros(&[h, d]),
        ur: Tensor::zeros(&[h, h]),
        br: Tensor::zeros(&[h]),
        wh: Tensor::zeros(&[h, d]),
        uh: Tensor::zeros(&[h, h]),
        bh: Tensor::zeros(&[h]),
    };
    let mut grad_inputs = Tensor::zeros(&[t_len, d]);
    let mut dh = vec![0.0; h];
    let mut daz = vec![0.0; h];
    let mut dar = vec![0.0; h];
    let mut dah = vec![0.0; h];
    let mut uh_dah = vec![0.0; h];
    let mut rh = vec![0.0; h];
    for t in (0..t_len).rev() {
        for (dhi, g) in dh.iter_mut().zip(grad_out.row(t).iter()) {
            *dhi += g;
        }
        let x = &cache.xs[t * d..(t + 1) * d];
        let h_prev = &cache.hs[t * h..(t + 1) * h];
        let zs = &cache.zs[t * h..(t + 1) * h];
        let rs = &cache.rs[t * h..(t + 1) * h];
        let gs = &cache.gs[t * h..(t + 1) * h];

        for i in 0..h {
            let dz = dh[i] * (gs[i] - h_prev[i]);
            daz[i] = dz * zs[i] * (1.0 - zs[i]);
            let dg = dh[i] * zs[i];
            dah[i] = dg * (1.0 - gs[i] * gs[i]);
            rh[i] = rs[i] * h_prev[i];
        }
        // dr comes through Uh^T dah
        uh_dah.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_acc(w.uh.data(), h, h, &dah, &mut uh_dah);
        for i in 0..h {
            let dr = uh_dah[i] * h_prev[i];
            dar[i] = dr * rs[i] * (1.0 - rs[i]);
        }

        outer_acc(grads.wz.data_mut(), h, d, &daz, x);
        outer_acc(grads.uz.data_mut(), h, h, &daz, h_prev);
        outer_acc(grads.wr.data_mut(), h, d, &dar, x);
        outer_acc(grads.ur.data_mut(), h, h, &dar, h_prev);
        outer_acc(grads.wh.data_mut(), h, d, &dah, x);
        outer_acc(grads.uh.data_mut(), h, h, &dah, &rh);
        for i in 0..h {
            grads.bz.data_mut()[i] += daz[i];
            grads.br.data_mut()[i] += dar[i];
            grads.bh.data_mut()[i] += dah[i];
        }

        let dx = grad_inputs.row_mut(t);
        matvec_t_acc(w.wz.data(), h, d, &daz, dx);
        matvec_t_acc(w.wr.data(), h, d, &dar, dx);
        matvec_t_acc(w.wh.data(), h, d, &dah, dx);

        // gradient flowing to h_{t-1}
        let mut dh_prev = vec![0.0; h];
        for i in 0..h {
            dh_prev[i] = dh[i] * (1.0 - zs[i]) + uh_dah[i] * rs[i];
        }
        matvec_t_acc(w.uz.data(), h, h, &daz, &mut dh_prev);
        matvec_t_acc(w.ur.data(), h, h, &dar, &mut dh_prev);
        dh = dh_prev;
    }
    Ok((grads, grad_inputs))
}
