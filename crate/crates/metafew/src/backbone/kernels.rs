//! Generic network kernels.
//!
//! One hand-derived forward/backward implementation, generic over the scalar
//! type. Instantiated at f32/f64 it yields values and exact gradients;
//! instantiated at `Dual<f32>`/`Dual<f64>` with parameters seeded as (theta,
//! v) the backward pass yields the exact Hessian-vector product H·v in the
//! tangent slot. All branch decisions (relu masks, pooling argmax, the
//! probability clamp) are taken on primal values so the dual pass follows the
//! primal pass exactly.

use crate::scalar::Real;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const PROB_EPS: f64 = 1e-7;

/// Resolved shapes for one conv block. Convolution preserves the spatial
/// size (stride 1, same padding); pooling divides it by the pool size with
/// floor semantics.
#[derive(Debug, Clone)]
pub(crate) struct ImageStage {
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ImagePlan {
    pub stages: Vec<ImageStage>,
    pub flat_dim: usize,
}

/// Resolved widths for the MLP variant: (d_in, d_out) per hidden layer.
#[derive(Debug, Clone)]
pub(crate) struct VectorPlan {
    pub hidden: Vec<(usize, usize)>,
    pub final_in: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum Plan {
    Image(ImagePlan),
    Vector(VectorPlan),
}

#[derive(Debug, Clone)]
pub(crate) struct KernelCfg {
    pub plan: Plan,
    pub use_batchnorm: bool,
    pub kernel_size: usize,
    pub pool_size: usize,
}

/// Everything the backward pass needs from the forward pass.
struct Tape<F> {
    /// acts[0] is the batch input; acts[i+1] is stage i's output.
    acts: Vec<Vec<F>>,
    /// Batchnorm normalized values per stage (empty when batchnorm is off).
    xhat: Vec<Vec<F>>,
    /// Batchnorm 1/sqrt(var + eps) per group per stage.
    inv_std: Vec<Vec<F>>,
    /// Pre-pool relu outputs per stage (image path only).
    relu_out: Vec<Vec<F>>,
    /// Flat argmax index into relu_out per pooled cell (image path only).
    pool_arg: Vec<Vec<usize>>,
    probs: Vec<F>,
    clamped: Vec<bool>,
}

fn sigmoid<F: Real>(z: F) -> F {
    if z.primal() >= 0.0 {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn conv_same<F: Real>(
    input: &[F],
    w: &[F],
    b: &[F],
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<F> {
    let pad = (k - 1) / 2;
    let mut out = vec![F::zero(); n * c_out * h * wd];
    for ni in 0..n {
        for co in 0..c_out {
            for y in 0..h {
                for x in 0..wd {
                    let mut acc = b[co];
                    for ci in 0..c_in {
                        let ibase = (ni * c_in + ci) * h * wd;
                        let wbase = (co * c_in + ci) * k * k;
                        for ky in 0..k {
                            let iy = match (y + ky).checked_sub(pad) {
                                Some(v) if v < h => v,
                                _ => continue,
                            };
                            for kx in 0..k {
                                let ix = match (x + kx).checked_sub(pad) {
                                    Some(v) if v < wd => v,
                                    _ => continue,
                                };
                                acc += w[wbase + ky * k + kx] * input[ibase + iy * wd + ix];
                            }
                        }
                    }
                    out[((ni * c_out + co) * h + y) * wd + x] = acc;
                }
            }
        }
    }
    out
}

fn conv_backward<F: Real>(
    g_out: &[F],
    input: &[F],
    w: &[F],
    dw: &mut [F],
    db: &mut [F],
    d_input: Option<&mut [F]>,
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    wd: usize,
    k: usize,
) {
    let pad = (k - 1) / 2;
    let mut d_in = d_input;
    for ni in 0..n {
        for co in 0..c_out {
            for y in 0..h {
                for x in 0..wd {
                    let g = g_out[((ni * c_out + co) * h + y) * wd + x];
                    db[co] += g;
                    for ci in 0..c_in {
                        let ibase = (ni * c_in + ci) * h * wd;
                        let wbase = (co * c_in + ci) * k * k;
                        for ky in 0..k {
                            let iy = match (y + ky).checked_sub(pad) {
                                Some(v) if v < h => v,
                                _ => continue,
                            };
                            for kx in 0..k {
                                let ix = match (x + kx).checked_sub(pad) {
                                    Some(v) if v < wd => v,
                                    _ => continue,
                                };
                                let idx = ibase + iy * wd + ix;
                                dw[wbase + ky * k + kx] += g * input[idx];
                                if let Some(di) = d_in.as_deref_mut() {
                                    di[idx] += w[wbase + ky * k + kx] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transductive batchnorm over groups of size `group` (batch x spatial per
/// channel for images, batch per feature for vectors). Statistics always come
/// from the current batch; no running averages exist.
fn bn_forward<F: Real>(
    z: &[F],
    gamma: &[F],
    beta: &[F],
    n: usize,
    c: usize,
    spatial: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let m = n * spatial;
    let inv_m = F::from_f64(1.0 / m as f64);
    let eps = F::from_f64(BN_EPS);
    let mut out = vec![F::zero(); z.len()];
    let mut xhat = vec![F::zero(); z.len()];
    let mut inv_std = vec![F::zero(); c];
    for ch in 0..c {
        let mut mean = F::zero();
        for ni in 0..n {
            let base = (ni * c + ch) * spatial;
            for s in 0..spatial {
                mean += z[base + s];
            }
        }
        mean = mean * inv_m;
        let mut var = F::zero();
        for ni in 0..n {
            let base = (ni * c + ch) * spatial;
            for s in 0..spatial {
                let d = z[base + s] - mean;
                var += d * d;
            }
        }
        var = var * inv_m;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[ch] = inv;
        for ni in 0..n {
            let base = (ni * c + ch) * spatial;
            for s in 0..spatial {
                let xh = (z[base + s] - mean) * inv;
                xhat[base + s] = xh;
                out[base + s] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (out, xhat, inv_std)
}

/// dL/dx for transductive batchnorm; also fills dgamma/dbeta. Derived from
/// x_hat = (x - mu) * inv_std with mu, var functions of the whole group.
#[allow(clippy::too_many_arguments)]
fn bn_backward<F: Real>(
    g: &[F],
    xhat: &[F],
    inv_std: &[F],
    gamma: &[F],
    dgamma: &mut [F],
    dbeta: &mut [F],
    n: usize,
    c: usize,
    spatial: usize,
) -> Vec<F> {
    let m = n * spatial;
    let inv_m = F::from_f64(1.0 / m as f64);
    let mut dx = vec![F::zero(); g.len()];
    for ch in 0..c {
        let mut sum_g = F::zero();
        let mut sum_gx = F::zero();
        for ni in 0..n {
            let base = (ni * c + ch) * spatial;
            for s in 0..spatial {
                sum_g += g[base + s];
                sum_gx += g[base + s] * xhat[base + s];
            }
        }
        dgamma[ch] += sum_gx;
        dbeta[ch] += sum_g;
        let coef = gamma[ch] * inv_std[ch];
        let mean_g = sum_g * inv_m;
        let mean_gx = sum_gx * inv_m;
        for ni in 0..n {
            let base = (ni * c + ch) * spatial;
            for s in 0..spatial {
                dx[base + s] = coef * (g[base + s] - mean_g - xhat[base + s] * mean_gx);
            }
        }
    }
    dx
}

fn relu<F: Real>(z: &[F]) -> Vec<F> {
    z.iter()
        .map(|&v| if v.primal() > 0.0 { v } else { F::zero() })
        .collect()
}

fn maxpool<F: Real>(
    input: &[F],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    p: usize,
    h_out: usize,
    w_out: usize,
) -> (Vec<F>, Vec<usize>) {
    let mut out = vec![F::zero(); n * c * h_out * w_out];
    let mut arg = vec![0usize; n * c * h_out * w_out];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * h * wd;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best_idx = base + (oy * p) * wd + ox * p;
                    let mut best = input[best_idx];
                    for py in 0..p {
                        for px in 0..p {
                            let idx = base + (oy * p + py) * wd + (ox * p + px);
                            if input[idx].primal() > best.primal() {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((ni * c + ch) * h_out + oy) * w_out + ox;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    (out, arg)
}

fn dense<F: Real>(input: &[F], w: &[F], b: &[F], n: usize, d_in: usize, d_out: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * d_out];
    for ni in 0..n {
        for o in 0..d_out {
            let mut acc = b[o];
            let wbase = o * d_in;
            let ibase = ni * d_in;
            for j in 0..d_in {
                acc += w[wbase + j] * input[ibase + j];
            }
            out[ni * d_out + o] = acc;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn dense_backward<F: Real>(
    g_out: &[F],
    input: &[F],
    w: &[F],
    dw: &mut [F],
    db: &mut [F],
    d_input: Option<&mut [F]>,
    n: usize,
    d_in: usize,
    d_out: usize,
) {
    let mut d_in_buf = d_input;
    for ni in 0..n {
        for o in 0..d_out {
            let g = g_out[ni * d_out + o];
            db[o] += g;
            let wbase = o * d_in;
            let ibase = ni * d_in;
            for j in 0..d_in {
                dw[wbase + j] += g * input[ibase + j];
                if let Some(di) = d_in_buf.as_deref_mut() {
                    di[ibase + j] += w[wbase + j] * g;
                }
            }
        }
    }
}

/// Walks the parameter vector in layout order, handing out one slice per
/// entry. Kernels and the layout builder must consume entries in the same
/// order; the final assertion catches drift.
struct Cursor<'a, F> {
    params: &'a [F],
    pos: usize,
}

impl<'a, F> Cursor<'a, F> {
    fn new(params: &'a [F]) -> Self {
        Self { params, pos: 0 }
    }
    fn take(&mut self, len: usize) -> &'a [F] {
        let s = &self.params[self.pos..self.pos + len];
        self.pos += len;
        s
    }
}

/// Mirror of `Cursor` for writing gradient slices; splits the buffer into
/// disjoint mutable regions in layout order.
struct CursorMut<'a, F> {
    rest: &'a mut [F],
}

impl<'a, F> CursorMut<'a, F> {
    fn new(grad: &'a mut [F]) -> Self {
        Self { rest: grad }
    }
    fn take(&mut self, len: usize) -> &'a mut [F] {
        let rest = std::mem::take(&mut self.rest);
        let (head, tail) = rest.split_at_mut(len);
        self.rest = tail;
        head
    }
}

fn forward_tape<F: Real>(cfg: &KernelCfg, params: &[F], inputs: &[f64], n: usize) -> Tape<F> {
    let input: Vec<F> = inputs.iter().map(|&x| F::from_f64(x)).collect();
    let mut cur = Cursor::new(params);
    let mut tape = Tape {
        acts: vec![input],
        xhat: Vec::new(),
        inv_std: Vec::new(),
        relu_out: Vec::new(),
        pool_arg: Vec::new(),
        probs: Vec::new(),
        clamped: Vec::new(),
    };
    let final_in_dim;
    match &cfg.plan {
        Plan::Image(plan) => {
            let k = cfg.kernel_size;
            for st in &plan.stages {
                let w = cur.take(st.c_out * st.c_in * k * k);
                let b = cur.take(st.c_out);
                let z = conv_same(
                    tape.acts.last().unwrap(),
                    w,
                    b,
                    n,
                    st.c_in,
                    st.c_out,
                    st.h_in,
                    st.w_in,
                    k,
                );
                let pre_relu = if cfg.use_batchnorm {
                    let gamma = cur.take(st.c_out);
                    let beta = cur.take(st.c_out);
                    let (out, xhat, inv_std) =
                        bn_forward(&z, gamma, beta, n, st.c_out, st.h_in * st.w_in);
                    tape.xhat.push(xhat);
                    tape.inv_std.push(inv_std);
                    out
                } else {
                    z
                };
                let r = relu(&pre_relu);
                let (pooled, arg) = maxpool(
                    &r,
                    n,
                    st.c_out,
                    st.h_in,
                    st.w_in,
                    cfg.pool_size,
                    st.h_out,
                    st.w_out,
                );
                tape.relu_out.push(r);
                tape.pool_arg.push(arg);
                tape.acts.push(pooled);
            }
            final_in_dim = plan.flat_dim;
        }
        Plan::Vector(plan) => {
            for &(d_in, d_out) in &plan.hidden {
                let w = cur.take(d_out * d_in);
                let b = cur.take(d_out);
                let z = dense(tape.acts.last().unwrap(), w, b, n, d_in, d_out);
                let pre_relu = if cfg.use_batchnorm {
                    let gamma = cur.take(d_out);
                    let beta = cur.take(d_out);
                    let (out, xhat, inv_std) = bn_forward(&z, gamma, beta, n, d_out, 1);
                    tape.xhat.push(xhat);
                    tape.inv_std.push(inv_std);
                    out
                } else {
                    z
                };
                tape.acts.push(relu(&pre_relu));
            }
            final_in_dim = plan.final_in;
        }
    }
    let w = cur.take(final_in_dim);
    let b = cur.take(1);
    let logits = dense(tape.acts.last().unwrap(), w, b, n, final_in_dim, 1);
    debug_assert_eq!(cur.pos, params.len());
    for &z in &logits {
        let p = sigmoid(z);
        // The clamp is a hard branch on the primal: a clamped probability is
        // a constant, so its gradient contribution is exactly zero.
        if p.primal() < PROB_EPS {
            tape.probs.push(F::from_f64(PROB_EPS));
            tape.clamped.push(true);
        } else if p.primal() > 1.0 - PROB_EPS {
            tape.probs.push(F::from_f64(1.0 - PROB_EPS));
            tape.clamped.push(true);
        } else {
            tape.probs.push(p);
            tape.clamped.push(false);
        }
    }
    tape
}

pub(crate) fn forward_probs<F: Real>(
    cfg: &KernelCfg,
    params: &[F],
    inputs: &[f64],
    n: usize,
) -> Vec<F> {
    forward_tape(cfg, params, inputs, n).probs
}

fn loss_from_probs<F: Real>(probs: &[F], labels: &[u8]) -> F {
    let inv_n = F::from_f64(1.0 / probs.len() as f64);
    let mut acc = F::zero();
    for (&p, &y) in probs.iter().zip(labels) {
        let term = if y == 1 { p.ln() } else { (F::one() - p).ln() };
        acc += term;
    }
    -(acc * inv_n)
}

/// Mean binary cross-entropy and its exact gradient with respect to every
/// parameter, in layout order.
pub(crate) fn loss_and_grad<F: Real>(
    cfg: &KernelCfg,
    params: &[F],
    inputs: &[f64],
    labels: &[u8],
    n: usize,
) -> (F, Vec<F>) {
    let tape = forward_tape(cfg, params, inputs, n);
    let loss = loss_from_probs(&tape.probs, labels);

    // d(mean bce)/d(logit) collapses to (p - y)/n for the unclamped branch.
    let inv_n = F::from_f64(1.0 / n as f64);
    let mut dz = vec![F::zero(); n];
    for i in 0..n {
        if !tape.clamped[i] {
            let y = F::from_f64(f64::from(labels[i]));
            dz[i] = (tape.probs[i] - y) * inv_n;
        }
    }

    let mut grad = vec![F::zero(); params.len()];
    let mut pcur = Cursor::new(params);
    let mut gcur = CursorMut::new(&mut grad);

    // Collect (param slice, grad slice) pairs in forward order, then unwind.
    match &cfg.plan {
        Plan::Image(plan) => {
            let k = cfg.kernel_size;
            struct StageSlices<'a, F> {
                w: &'a [F],
                gamma: Option<&'a [F]>,
                dw: &'a mut [F],
                db: &'a mut [F],
                dgamma: Option<&'a mut [F]>,
                dbeta: Option<&'a mut [F]>,
            }
            let mut slices: Vec<StageSlices<F>> = Vec::with_capacity(plan.stages.len());
            for st in &plan.stages {
                let w = pcur.take(st.c_out * st.c_in * k * k);
                let _b = pcur.take(st.c_out);
                let dw = gcur.take(st.c_out * st.c_in * k * k);
                let db = gcur.take(st.c_out);
                let (gamma, dgamma, dbeta) = if cfg.use_batchnorm {
                    let gamma = pcur.take(st.c_out);
                    let _beta = pcur.take(st.c_out);
                    (
                        Some(gamma),
                        Some(gcur.take(st.c_out)),
                        Some(gcur.take(st.c_out)),
                    )
                } else {
                    (None, None, None)
                };
                slices.push(StageSlices {
                    w,
                    gamma,
                    dw,
                    db,
                    dgamma,
                    dbeta,
                });
            }
            let fc_w = pcur.take(plan.flat_dim);
            let _fc_b = pcur.take(1);
            let dfc_w = gcur.take(plan.flat_dim);
            let dfc_b = gcur.take(1);
            debug_assert_eq!(pcur.pos, params.len());

            let mut d_act = vec![F::zero(); n * plan.flat_dim];
            dense_backward(
                &dz,
                tape.acts.last().unwrap(),
                fc_w,
                dfc_w,
                dfc_b,
                Some(&mut d_act),
                n,
                plan.flat_dim,
                1,
            );

            for (i, st) in plan.stages.iter().enumerate().rev() {
                let sl = &mut slices[i];
                // Unpool: route each pooled gradient to its argmax source.
                let mut d_relu = vec![F::zero(); n * st.c_out * st.h_in * st.w_in];
                for (cell, &src) in tape.pool_arg[i].iter().enumerate() {
                    d_relu[src] += d_act[cell];
                }
                // Relu mask from the stored outputs: zero stays zero.
                let relu_out = &tape.relu_out[i];
                for (g, &r) in d_relu.iter_mut().zip(relu_out.iter()) {
                    if r.primal() <= 0.0 {
                        *g = F::zero();
                    }
                }
                let d_conv = if cfg.use_batchnorm {
                    bn_backward(
                        &d_relu,
                        &tape.xhat[i],
                        &tape.inv_std[i],
                        sl.gamma.unwrap(),
                        sl.dgamma.as_deref_mut().unwrap(),
                        sl.dbeta.as_deref_mut().unwrap(),
                        n,
                        st.c_out,
                        st.h_in * st.w_in,
                    )
                } else {
                    d_relu
                };
                let mut d_input = if i > 0 {
                    Some(vec![F::zero(); n * st.c_in * st.h_in * st.w_in])
                } else {
                    None
                };
                conv_backward(
                    &d_conv,
                    &tape.acts[i],
                    sl.w,
                    sl.dw,
                    sl.db,
                    d_input.as_deref_mut(),
                    n,
                    st.c_in,
                    st.c_out,
                    st.h_in,
                    st.w_in,
                    k,
                );
                if let Some(di) = d_input {
                    d_act = di;
                }
            }
        }
        Plan::Vector(plan) => {
            struct StageSlices<'a, F> {
                w: &'a [F],
                gamma: Option<&'a [F]>,
                dw: &'a mut [F],
                db: &'a mut [F],
                dgamma: Option<&'a mut [F]>,
                dbeta: Option<&'a mut [F]>,
            }
            let mut slices: Vec<StageSlices<F>> = Vec::with_capacity(plan.hidden.len());
            for &(d_in, d_out) in &plan.hidden {
                let w = pcur.take(d_out * d_in);
                let _b = pcur.take(d_out);
                let dw = gcur.take(d_out * d_in);
                let db = gcur.take(d_out);
                let (gamma, dgamma, dbeta) = if cfg.use_batchnorm {
                    let gamma = pcur.take(d_out);
                    let _beta = pcur.take(d_out);
                    (Some(gamma), Some(gcur.take(d_out)), Some(gcur.take(d_out)))
                } else {
                    (None, None, None)
                };
                slices.push(StageSlices {
                    w,
                    gamma,
                    dw,
                    db,
                    dgamma,
                    dbeta,
                });
            }
            let fc_w = pcur.take(plan.final_in);
            let _fc_b = pcur.take(1);
            let dfc_w = gcur.take(plan.final_in);
            let dfc_b = gcur.take(1);
            debug_assert_eq!(pcur.pos, params.len());

            let mut d_act = vec![F::zero(); n * plan.final_in];
            dense_backward(
                &dz,
                tape.acts.last().unwrap(),
                fc_w,
                dfc_w,
                dfc_b,
                Some(&mut d_act),
                n,
                plan.final_in,
                1,
            );

            for (i, &(d_in, d_out)) in plan.hidden.iter().enumerate().rev() {
                let sl = &mut slices[i];
                let relu_out = &tape.acts[i + 1];
                for (g, &r) in d_act.iter_mut().zip(relu_out.iter()) {
                    if r.primal() <= 0.0 {
                        *g = F::zero();
                    }
                }
                let d_lin = if cfg.use_batchnorm {
                    bn_backward(
                        &d_act,
                        &tape.xhat[i],
                        &tape.inv_std[i],
                        sl.gamma.unwrap(),
                        sl.dgamma.as_deref_mut().unwrap(),
                        sl.dbeta.as_deref_mut().unwrap(),
                        n,
                        d_out,
                        1,
                    )
                } else {
                    std::mem::take(&mut d_act)
                };
                let mut d_input = if i > 0 {
                    Some(vec![F::zero(); n * d_in])
                } else {
                    None
                };
                dense_backward(
                    &d_lin,
                    &tape.acts[i],
                    sl.w,
                    sl.dw,
                    sl.db,
                    d_input.as_deref_mut(),
                    n,
                    d_in,
                    d_out,
                );
                if let Some(di) = d_input {
                    d_act = di;
                }
            }
        }
    }
    (loss, grad)
}
