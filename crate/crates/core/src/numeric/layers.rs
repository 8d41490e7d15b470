//! Layer primitives: affine maps, saturating activations and the gated
//! recurrent cell, each with a hand-derived backward.

use super::tensor::{axpy, hadamard_accum};
use super::{NumericError, Result, Tensor2};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid(v)).collect()
}

/// d sigma/dx expressed through the activation value `y = sigma(x)`.
#[inline]
pub fn sigmoid_grad_from_output(y: f64) -> f64 {
    y * (1.0 - y)
}

pub fn tanh_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// d tanh/dx expressed through the activation value `y = tanh(x)`.
#[inline]
pub fn tanh_grad_from_output(y: f64) -> f64 {
    1.0 - y * y
}

/// `y = W x + b`.
pub fn linear_forward(w: &Tensor2, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.cols() {
        return Err(NumericError::DimensionMismatch {
            op: "linear_forward",
            lhs: format!("{}x{}", w.rows(), w.cols()),
            rhs: format!("x len {}", x.len()),
        });
    }
    if b.len() != w.rows() {
        return Err(NumericError::DimensionMismatch {
            op: "linear_forward",
            lhs: format!("{}x{}", w.rows(), w.cols()),
            rhs: format!("b len {}", b.len()),
        });
    }
    let mut y = b.to_vec();
    w.matvec_accum(x, &mut y);
    Ok(y)
}

/// Gradients of `y = W x + b` given upstream `dy`.
///
/// Returns `dx` and accumulates `dW += dy ⊗ x`, `db += dy`.
pub fn linear_backward(
    w: &Tensor2,
    x: &[f64],
    dy: &[f64],
    dw: &mut Tensor2,
    db: &mut [f64],
) -> Result<Vec<f64>> {
    if dy.len() != w.rows() || x.len() != w.cols() {
        return Err(NumericError::DimensionMismatch {
            op: "linear_backward",
            lhs: format!("{}x{}", w.rows(), w.cols()),
            rhs: format!("x len {}, dy len {}", x.len(), dy.len()),
        });
    }
    dw.add_outer(dy, x);
    axpy(db, 1.0, dy);
    let mut dx = vec![0.0; w.cols()];
    w.matvec_t_accum(dy, &mut dx);
    Ok(dx)
}

/// The six matrices of the gated cell: update (`wz`,`uz`), reset (`wr`,`ur`)
/// and candidate (`wh`,`uh`). `w*` act on the incoming message, `u*` on the
/// previous hidden state.
#[derive(Clone, Copy)]
pub struct GruWeights<'a> {
    pub wz: &'a Tensor2,
    pub uz: &'a Tensor2,
    pub wr: &'a Tensor2,
    pub ur: &'a Tensor2,
    pub wh: &'a Tensor2,
    pub uh: &'a Tensor2,
}

/// Intermediates saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct GruTape {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub hc: Vec<f64>,
}

fn check_stage(values: &[f64], stage: &'static str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NumericError::NonFinite { stage });
    }
    Ok(())
}

/// One gated update:
///
/// ```text
/// z = sigma(Wz a + Uz h)
/// r = sigma(Wr a + Ur h)
/// hc = tanh(Wh a + Uh (r .* h))
/// h' = (1 - z) .* h + z .* hc
/// ```
pub fn gru_forward(h_prev: &[f64], a: &[f64], w: GruWeights) -> Result<(Vec<f64>, GruTape)> {
    let h = h_prev.len();
    let mut z = vec![0.0; h];
    let mut r = vec![0.0; h];
    let mut hc = vec![0.0; h];
    let mut h_next = vec![0.0; h];
    gru_forward_into(h_prev, a, w, &mut z, &mut r, &mut hc, &mut h_next)?;
    Ok((h_next, GruTape { z, r, hc }))
}

/// [`gru_forward`] writing gate intermediates into caller-provided buffers.
#[allow(clippy::too_many_arguments)]
pub fn gru_forward_into(
    h_prev: &[f64],
    a: &[f64],
    w: GruWeights,
    z: &mut [f64],
    r: &mut [f64],
    hc: &mut [f64],
    h_next: &mut [f64],
) -> Result<()> {
    let h = h_prev.len();
    if a.len() != w.wz.cols() || h != w.uz.cols() || w.wz.rows() != h {
        return Err(NumericError::DimensionMismatch {
            op: "gru_forward",
            lhs: format!("{}x{}", w.wz.rows(), w.wz.cols()),
            rhs: format!("h len {}, a len {}", h, a.len()),
        });
    }
    w.wz.matvec_into(a, z);
    w.uz.matvec_accum(h_prev, z);
    for v in z.iter_mut() {
        *v = sigmoid(*v);
    }
    check_stage(z, "update_gate")?;

    w.wr.matvec_into(a, r);
    w.ur.matvec_accum(h_prev, r);
    for v in r.iter_mut() {
        *v = sigmoid(*v);
    }
    check_stage(r, "reset_gate")?;

    // h_next doubles as scratch for r .* h_prev before it is overwritten.
    for i in 0..h {
        h_next[i] = r[i] * h_prev[i];
    }
    w.wh.matvec_into(a, hc);
    let rh = h_next.to_vec();
    w.uh.matvec_accum(&rh, hc);
    for v in hc.iter_mut() {
        *v = v.tanh();
    }
    check_stage(hc, "candidate")?;

    for i in 0..h {
        h_next[i] = (1.0 - z[i]) * h_prev[i] + z[i] * hc[i];
    }
    check_stage(h_next, "hidden_update")?;
    Ok(())
}

/// Gradient buffers for one gated cell, reused across nodes of a step.
pub struct GruGradAccum {
    pub dwz: Tensor2,
    pub duz: Tensor2,
    pub dwr: Tensor2,
    pub dur: Tensor2,
    pub dwh: Tensor2,
    pub duh: Tensor2,
}

impl GruGradAccum {
    pub fn zeros(hidden: usize) -> Self {
        GruGradAccum {
            dwz: Tensor2::zeros(hidden, hidden),
            duz: Tensor2::zeros(hidden, hidden),
            dwr: Tensor2::zeros(hidden, hidden),
            dur: Tensor2::zeros(hidden, hidden),
            dwh: Tensor2::zeros(hidden, hidden),
            duh: Tensor2::zeros(hidden, hidden),
        }
    }
}

/// Backward of [`gru_forward`]. Accumulates weight gradients into `acc` and
/// the input gradients into `d_h_prev` / `d_a`. `z`, `r`, `hc` are the taped
/// intermediates of the forward pass.
#[allow(clippy::too_many_arguments)]
pub fn gru_backward(
    h_prev: &[f64],
    a: &[f64],
    w: GruWeights,
    z: &[f64],
    r: &[f64],
    hc: &[f64],
    d_h_next: &[f64],
    acc: &mut GruGradAccum,
    d_h_prev: &mut [f64],
    d_a: &mut [f64],
) {
    let h = h_prev.len();
    debug_assert_eq!(d_h_next.len(), h);

    // h' = (1-z).*h + z.*hc
    let mut d_z = vec![0.0; h];
    let mut d_hc = vec![0.0; h];
    for i in 0..h {
        d_z[i] = d_h_next[i] * (hc[i] - h_prev[i]);
        d_hc[i] = d_h_next[i] * z[i];
        d_h_prev[i] += d_h_next[i] * (1.0 - z[i]);
    }

    // candidate branch: hc = tanh(Wh a + Uh (r.*h))
    let d_pre_h: Vec<f64> = (0..h)
        .map(|i| d_hc[i] * tanh_grad_from_output(hc[i]))
        .collect();
    let rh: Vec<f64> = r.iter().zip(h_prev.iter()).map(|(ri, hi)| ri * hi).collect();
    acc.dwh.add_outer(&d_pre_h, a);
    acc.duh.add_outer(&d_pre_h, &rh);
    w.wh.matvec_t_accum(&d_pre_h, d_a);
    let mut d_rh = vec![0.0; h];
    w.uh.matvec_t_accum(&d_pre_h, &mut d_rh);
    let mut d_r = vec![0.0; h];
    hadamard_accum(&mut d_r, &d_rh, h_prev);
    hadamard_accum(d_h_prev, &d_rh, r);

    // reset branch: r = sigma(Wr a + Ur h)
    let d_pre_r: Vec<f64> = (0..h)
        .map(|i| d_r[i] * sigmoid_grad_from_output(r[i]))
        .collect();
    acc.dwr.add_outer(&d_pre_r, a);
    acc.dur.add_outer(&d_pre_r, h_prev);
    w.wr.matvec_t_accum(&d_pre_r, d_a);
    w.ur.matvec_t_accum(&d_pre_r, d_h_prev);

    // update branch: z = sigma(Wz a + Uz h)
    let d_pre_z: Vec<f64> = (0..h)
        .map(|i| d_z[i] * sigmoid_grad_from_output(z[i]))
        .collect();
    acc.dwz.add_outer(&d_pre_z, a);
    acc.duz.add_outer(&d_pre_z, h_prev);
    w.wz.matvec_t_accum(&d_pre_z, d_a);
    w.uz.matvec_t_accum(&d_pre_z, d_h_prev);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_weights(h: usize) -> [Tensor2; 6] {
        [
            Tensor2::zeros(h, h),
            Tensor2::zeros(h, h),
            Tensor2::zeros(h, h),
            Tensor2::zeros(h, h),
            Tensor2::zeros(h, h),
            Tensor2::zeros(h, h),
        ]
    }

    fn weights(m: &[Tensor2; 6]) -> GruWeights<'_> {
        GruWeights {
            wz: &m[0],
            uz: &m[1],
            wr: &m[2],
            ur: &m[3],
            wh: &m[4],
            uh: &m[5],
        }
    }

    #[test]
    fn linear_identity() {
        let w = Tensor2::identity(2);
        let y = linear_forward(&w, &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    #[test]
    fn linear_zero_weight_returns_bias() {
        let w = Tensor2::zeros(1, 4);
        let y = linear_forward(&w, &[9.0, -2.0, 0.5, 1.0], &[3.0]).unwrap();
        assert_eq!(y, vec![3.0]);
    }

    #[test]
    fn sigmoid_tanh_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(0.0f64.tanh(), 0.0);
    }

    #[test]
    fn gru_zero_params_halves_hidden() {
        let h = vec![1.0, -2.0, 0.5];
        let m = zero_weights(3);
        let (h_next, _) = gru_forward(&h, &[0.0; 3], weights(&m)).unwrap();
        for (next, prev) in h_next.iter().zip(h.iter()) {
            assert!((next - 0.5 * prev).abs() < 1e-15);
        }
    }

    #[test]
    fn gru_zero_hidden_zero_params_stays_zero() {
        let m = zero_weights(4);
        let (h_next, _) = gru_forward(&[0.0; 4], &[0.0; 4], weights(&m)).unwrap();
        assert!(h_next.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gru_nan_input_names_stage() {
        let m = zero_weights(2);
        let err = gru_forward(&[f64::NAN, 0.0], &[0.0; 2], weights(&m)).unwrap_err();
        assert!(err.to_string().contains("update_gate"), "{err}");
    }
}
