//! Batched forward and backward passes of the waypoint network.
//!
//! Activations are stored channel-major across the batch (`[C][B][H][W]`) so
//! that every convolution is a single GEMM over an im2col matrix.

use super::{LossReduction, PolicyConfig};
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating-point element type of the network (`f32` for training, `f64` for gradient checks).
pub trait Scalar:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    /// `C = alpha * A B + beta * C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn sign(self) -> Self {
        if self > Self::ZERO {
            Self::ONE
        } else if self < Self::ZERO {
            -Self::ONE
        } else {
            Self::ZERO
        }
    }

    fn sigmoid(self) -> Self {
        Self::ONE / (Self::ONE + (-self).exp())
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                // SAFETY: the extents of all three operands were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Offsets of every parameter tensor inside the flat parameter vector, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub conv: Vec<ConvLayout>,
    pub gru_w_ih: usize,
    pub gru_w_hh: usize,
    pub gru_b_ih: usize,
    pub gru_b_hh: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvLayout {
    pub cin: usize,
    pub cout: usize,
    pub w: usize,
    pub b: usize,
    /// Input spatial size (square).
    pub size_in: usize,
}

pub const GRU_INPUT: usize = 4;

impl Layout {
    pub fn new(cfg: &PolicyConfig) -> Self {
        let mut off = 0;
        let mut conv = Vec::new();
        let mut size = cfg.grid;
        for pair in cfg.channels.windows(2) {
            let (cin, cout) = (pair[0], pair[1]);
            let w = off;
            off += cout * cin * 9;
            let b = off;
            off += cout;
            conv.push(ConvLayout { cin, cout, w, b, size_in: size });
            size /= 2;
        }
        let h = cfg.hidden;
        let gru_w_ih = off;
        off += 3 * h * GRU_INPUT;
        let gru_w_hh = off;
        off += 3 * h * h;
        let gru_b_ih = off;
        off += 3 * h;
        let gru_b_hh = off;
        off += 3 * h;
        let head_w = off;
        off += 2 * h;
        let head_b = off;
        off += 2;
        Self { conv, gru_w_ih, gru_w_hh, gru_b_ih, gru_b_hh, head_w, head_b, total: off, hidden: h }
    }

    /// Named parameter groups as (name, offset, len, fan_in).
    pub fn groups(&self) -> Vec<(String, usize, usize, usize)> {
        let mut g = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            g.push((format!("conv{}.weight", i + 1), c.w, c.cout * c.cin * 9, c.cin * 9));
            g.push((format!("conv{}.bias", i + 1), c.b, c.cout, c.cin * 9));
        }
        let h = self.hidden;
        g.push(("gru.weight_ih".into(), self.gru_w_ih, 3 * h * GRU_INPUT, h));
        g.push(("gru.weight_hh".into(), self.gru_w_hh, 3 * h * h, h));
        g.push(("gru.bias_ih".into(), self.gru_b_ih, 3 * h, h));
        g.push(("gru.bias_hh".into(), self.gru_b_hh, 3 * h, h));
        g.push(("head.weight".into(), self.head_w, 2 * h, h));
        g.push(("head.bias".into(), self.head_b, 2, h));
        g
    }
}

struct ConvCache<S> {
    cols: Vec<S>,
    /// Post-ReLU output `[Cout][B][Ho][Wo]`.
    out: Vec<S>,
}

struct StepCache<S> {
    x: Vec<S>,
    h_prev: Vec<S>,
    r: Vec<S>,
    z: Vec<S>,
    n: Vec<S>,
    ghn: Vec<S>,
    h: Vec<S>,
}

/// Reusable activation storage for one batch.
pub struct Workspace<S> {
    batch: usize,
    /// Input `[2][B][G][G]`.
    pub input: Vec<S>,
    /// Goals `[B][2]`.
    pub goals: Vec<S>,
    convs: Vec<ConvCache<S>>,
    feature: Vec<S>,
    steps: Vec<StepCache<S>>,
    /// Predicted waypoints `[T][B][2]`.
    pub waypoints: Vec<S>,
}

impl<S: Scalar> Workspace<S> {
    pub fn new(cfg: &PolicyConfig, batch: usize) -> Self {
        let g = cfg.grid;
        Self {
            batch,
            input: vec![S::ZERO; cfg.channels[0] * batch * g * g],
            goals: vec![S::ZERO; batch * 2],
            convs: Vec::new(),
            feature: Vec::new(),
            steps: Vec::new(),
            waypoints: vec![S::ZERO; cfg.horizon * batch * 2],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn waypoint(&self, tau: usize, b: usize) -> (S, S) {
        let i = (tau * self.batch + b) * 2;
        (self.waypoints[i], self.waypoints[i + 1])
    }

    /// Post-ReLU activations of each convolution stage; used by gradient checks.
    pub fn relu_signature(&self) -> Vec<bool> {
        self.convs.iter().flat_map(|c| c.out.iter().map(|&v| v > S::ZERO)).collect()
    }
}

fn im2col<S: Scalar>(input: &[S], cin: usize, batch: usize, size: usize, cols: &mut Vec<S>) {
    let so = size / 2;
    let n = batch * so * so;
    cols.clear();
    cols.resize(cin * 9 * n, S::ZERO);
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * n;
                for b in 0..batch {
                    let src = &input[(c * batch + b) * size * size..(c * batch + b + 1) * size * size];
                    for oy in 0..so {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= size as isize {
                            continue;
                        }
                        let dst = row + (b * so + oy) * so;
                        let src_row = &src[iy as usize * size..(iy as usize + 1) * size];
                        for ox in 0..so {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < size as isize {
                                cols[dst + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], cin: usize, batch: usize, size: usize, out: &mut [S]) {
    let so = size / 2;
    let n = batch * so * so;
    out.iter_mut().for_each(|v| *v = S::ZERO);
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * n;
                for b in 0..batch {
                    let base = (c * batch + b) * size * size;
                    for oy in 0..so {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= size as isize {
                            continue;
                        }
                        let src = row + (b * so + oy) * so;
                        for ox in 0..so {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < size as isize {
                                out[base + iy as usize * size + ix as usize] += cols[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Runs the network on the batch already written into `ws.input` / `ws.goals`.
pub fn forward<S: Scalar>(cfg: &PolicyConfig, layout: &Layout, params: &[S], ws: &mut Workspace<S>) {
    let batch = ws.batch;
    let h = layout.hidden;
    // Encoder.
    let mut convs = std::mem::take(&mut ws.convs);
    convs.resize_with(layout.conv.len(), || ConvCache { cols: Vec::new(), out: Vec::new() });
    for (li, cl) in layout.conv.iter().enumerate() {
        let (prev, rest) = convs.split_at_mut(li);
        let input: &[S] = if li == 0 { &ws.input } else { &prev[li - 1].out };
        let cache = &mut rest[0];
        im2col(input, cl.cin, batch, cl.size_in, &mut cache.cols);
        let so = cl.size_in / 2;
        let n = batch * so * so;
        let k = cl.cin * 9;
        cache.out.clear();
        cache.out.resize(cl.cout * n, S::ZERO);
        S::gemm(
            cl.cout,
            k,
            n,
            &params[cl.w..cl.w + cl.cout * k],
            k as isize,
            1,
            &cache.cols,
            n as isize,
            1,
            S::ZERO,
            &mut cache.out,
            n as isize,
            1,
        );
        for co in 0..cl.cout {
            let bias = params[cl.b + co];
            for v in &mut cache.out[co * n..(co + 1) * n] {
                let x = *v + bias;
                *v = if x > S::ZERO { x } else { S::ZERO };
            }
        }
    }
    // Global average pool -> feature [B][C].
    let last = layout.conv.last().unwrap();
    let so = last.size_in / 2;
    let area = so * so;
    let cout = last.cout;
    assert_eq!(cout, h, "encoder width must equal the GRU hidden size");
    ws.feature.clear();
    ws.feature.resize(batch * cout, S::ZERO);
    let inv = S::from_f64(1.0 / area as f64);
    let out = &convs.last().unwrap().out;
    for c in 0..cout {
        for b in 0..batch {
            let s = out[(c * batch + b) * area..(c * batch + b + 1) * area].iter().fold(S::ZERO, |a, &v| a + v);
            ws.feature[b * cout + c] = s * inv;
        }
    }
    ws.convs = convs;

    // Recurrent waypoint decoder.
    let t_max = cfg.horizon;
    ws.steps.clear();
    let mut h_prev = ws.feature.clone();
    let mut w_prev = vec![S::ZERO; batch * 2];
    let w_ih = &params[layout.gru_w_ih..layout.gru_w_ih + 3 * h * GRU_INPUT];
    let w_hh = &params[layout.gru_w_hh..layout.gru_w_hh + 3 * h * h];
    let b_ih = &params[layout.gru_b_ih..layout.gru_b_ih + 3 * h];
    let b_hh = &params[layout.gru_b_hh..layout.gru_b_hh + 3 * h];
    let head_w = &params[layout.head_w..layout.head_w + 2 * h];
    let head_b = &params[layout.head_b..layout.head_b + 2];
    let mut gi = vec![S::ZERO; batch * 3 * h];
    let mut gh = vec![S::ZERO; batch * 3 * h];
    for tau in 0..t_max {
        let mut x = vec![S::ZERO; batch * GRU_INPUT];
        for b in 0..batch {
            x[b * 4] = w_prev[b * 2];
            x[b * 4 + 1] = w_prev[b * 2 + 1];
            x[b * 4 + 2] = ws.goals[b * 2];
            x[b * 4 + 3] = ws.goals[b * 2 + 1];
        }
        // gi = x W_ih^T ; gh = h W_hh^T
        S::gemm(batch, GRU_INPUT, 3 * h, &x, 4, 1, w_ih, 1, 4, S::ZERO, &mut gi, 3 * h as isize, 1);
        S::gemm(batch, h, 3 * h, &h_prev, h as isize, 1, w_hh, 1, h as isize, S::ZERO, &mut gh, 3 * h as isize, 1);
        let mut r = vec![S::ZERO; batch * h];
        let mut z = vec![S::ZERO; batch * h];
        let mut n = vec![S::ZERO; batch * h];
        let mut ghn = vec![S::ZERO; batch * h];
        let mut h_new = vec![S::ZERO; batch * h];
        for b in 0..batch {
            let gi_b = &gi[b * 3 * h..(b + 1) * 3 * h];
            let gh_b = &gh[b * 3 * h..(b + 1) * 3 * h];
            for j in 0..h {
                let rj = (gi_b[j] + b_ih[j] + gh_b[j] + b_hh[j]).sigmoid();
                let zj = (gi_b[h + j] + b_ih[h + j] + gh_b[h + j] + b_hh[h + j]).sigmoid();
                let ghn_j = gh_b[2 * h + j] + b_hh[2 * h + j];
                let nj = (gi_b[2 * h + j] + b_ih[2 * h + j] + rj * ghn_j).tanh();
                let i = b * h + j;
                r[i] = rj;
                z[i] = zj;
                n[i] = nj;
                ghn[i] = ghn_j;
                h_new[i] = (S::ONE - zj) * nj + zj * h_prev[i];
            }
        }
        for b in 0..batch {
            for o in 0..2 {
                let mut acc = head_b[o];
                for j in 0..h {
                    acc += head_w[o * h + j] * h_new[b * h + j];
                }
                let w = w_prev[b * 2 + o] + acc;
                w_prev[b * 2 + o] = w;
                ws.waypoints[(tau * batch + b) * 2 + o] = w;
            }
        }
        let prev = std::mem::replace(&mut h_prev, h_new.clone());
        ws.steps.push(StepCache { x, h_prev: prev, r, z, n, ghn, h: h_new });
    }
}

/// Objective for the batch: mean over samples of the per-sample imitation loss.
pub fn batch_loss<S: Scalar>(cfg: &PolicyConfig, ws: &Workspace<S>, targets: &[S]) -> S {
    let batch = ws.batch;
    let mut total = S::ZERO;
    for tau in 0..cfg.horizon {
        for b in 0..batch {
            let i = (tau * batch + b) * 2;
            total += (ws.waypoints[i] - targets[i]).abs() + (ws.waypoints[i + 1] - targets[i + 1]).abs();
        }
    }
    total * S::from_f64(reduction_scale(cfg) / batch as f64)
}

fn reduction_scale(cfg: &PolicyConfig) -> f64 {
    match cfg.loss_reduction {
        LossReduction::Sum => 1.0,
        LossReduction::Mean => 1.0 / (2 * cfg.horizon) as f64,
    }
}

/// Backpropagates [`batch_loss`] into `grads` (overwritten). Targets use the `[T][B][2]` layout.
pub fn backward<S: Scalar>(cfg: &PolicyConfig, layout: &Layout, params: &[S], ws: &Workspace<S>, targets: &[S], grads: &mut [S]) {
    grads.iter_mut().for_each(|g| *g = S::ZERO);
    let batch = ws.batch;
    let h = layout.hidden;
    let t_max = cfg.horizon;
    let scale = S::from_f64(reduction_scale(cfg) / batch as f64);
    let w_ih = &params[layout.gru_w_ih..layout.gru_w_ih + 3 * h * GRU_INPUT];
    let w_hh = &params[layout.gru_w_hh..layout.gru_w_hh + 3 * h * h];
    let head_w = &params[layout.head_w..layout.head_w + 2 * h];

    // dL/dw_tau, [T+1][B][2]; index 0 is the fixed origin.
    let mut gw = vec![S::ZERO; (t_max + 1) * batch * 2];
    for tau in 0..t_max {
        for b in 0..batch {
            for o in 0..2 {
                let i = (tau * batch + b) * 2 + o;
                gw[((tau + 1) * batch + b) * 2 + o] = (ws.waypoints[i] - targets[i]).sign() * scale;
            }
        }
    }
    let mut dh_carry = vec![S::ZERO; batch * h];
    let mut dgi = vec![S::ZERO; batch * 3 * h];
    let mut dgh = vec![S::ZERO; batch * 3 * h];
    let mut dx = vec![S::ZERO; batch * GRU_INPUT];
    let mut dh_prev = vec![S::ZERO; batch * h];
    for tau in (1..=t_max).rev() {
        let step = &ws.steps[tau - 1];
        let d_delta: Vec<S> = gw[tau * batch * 2..(tau + 1) * batch * 2].to_vec();
        for i in 0..batch * 2 {
            let v = d_delta[i];
            gw[(tau - 1) * batch * 2 + i] += v;
        }
        // Head.
        {
            let (gw_head, gb_head) = grads[layout.head_w..layout.head_b + 2].split_at_mut(2 * h);
            for b in 0..batch {
                for o in 0..2 {
                    let d = d_delta[b * 2 + o];
                    gb_head[o] += d;
                    for j in 0..h {
                        gw_head[o * h + j] += d * step.h[b * h + j];
                        dh_carry[b * h + j] += d * head_w[o * h + j];
                    }
                }
            }
        }
        // GRU cell.
        for b in 0..batch {
            for j in 0..h {
                let i = b * h + j;
                let dh = dh_carry[i];
                let (r, z, n) = (step.r[i], step.z[i], step.n[i]);
                let dn = dh * (S::ONE - z);
                let dz = dh * (step.h_prev[i] - n);
                dh_prev[i] = dh * z;
                let da_n = dn * (S::ONE - n * n);
                let dr = da_n * step.ghn[i];
                let da_r = dr * r * (S::ONE - r);
                let da_z = dz * z * (S::ONE - z);
                let base = b * 3 * h;
                dgi[base + j] = da_r;
                dgi[base + h + j] = da_z;
                dgi[base + 2 * h + j] = da_n;
                dgh[base + j] = da_r;
                dgh[base + h + j] = da_z;
                dgh[base + 2 * h + j] = da_n * r;
            }
        }
        // dW_ih += dgi^T x ; dW_hh += dgh^T h_prev
        S::gemm(3 * h, batch, GRU_INPUT, &dgi, 1, 3 * h as isize, &step.x, 4, 1, S::ONE, &mut grads[layout.gru_w_ih..layout.gru_w_ih + 3 * h * GRU_INPUT], 4, 1);
        S::gemm(3 * h, batch, h, &dgh, 1, 3 * h as isize, &step.h_prev, h as isize, 1, S::ONE, &mut grads[layout.gru_w_hh..layout.gru_w_hh + 3 * h * h], h as isize, 1);
        for b in 0..batch {
            for j in 0..3 * h {
                grads[layout.gru_b_ih + j] += dgi[b * 3 * h + j];
                grads[layout.gru_b_hh + j] += dgh[b * 3 * h + j];
            }
        }
        // dx = dgi W_ih ; dh_prev += dgh W_hh
        S::gemm(batch, 3 * h, GRU_INPUT, &dgi, 3 * h as isize, 1, w_ih, 4, 1, S::ZERO, &mut dx, 4, 1);
        S::gemm(batch, 3 * h, h, &dgh, 3 * h as isize, 1, w_hh, h as isize, 1, S::ONE, &mut dh_prev, h as isize, 1);
        for b in 0..batch {
            gw[((tau - 1) * batch + b) * 2] += dx[b * 4];
            gw[((tau - 1) * batch + b) * 2 + 1] += dx[b * 4 + 1];
        }
        std::mem::swap(&mut dh_carry, &mut dh_prev);
    }

    // dh_carry is now dL/dh_0 = dL/dfeature, [B][C]. Back through the pooling.
    let last = layout.conv.last().unwrap();
    let so = last.size_in / 2;
    let area = so * so;
    let inv = S::from_f64(1.0 / area as f64);
    let mut d_out = vec![S::ZERO; last.cout * batch * area];
    for c in 0..last.cout {
        for b in 0..batch {
            let g = dh_carry[b * last.cout + c] * inv;
            for v in &mut d_out[(c * batch + b) * area..(c * batch + b + 1) * area] {
                *v = g;
            }
        }
    }
    for li in (0..layout.conv.len()).rev() {
        let cl = layout.conv[li];
        let cache = &ws.convs[li];
        let so = cl.size_in / 2;
        let n = batch * so * so;
        let k = cl.cin * 9;
        // ReLU mask.
        for (d, &o) in d_out.iter_mut().zip(&cache.out) {
            if o <= S::ZERO {
                *d = S::ZERO;
            }
        }
        for co in 0..cl.cout {
            grads[cl.b + co] += d_out[co * n..(co + 1) * n].iter().fold(S::ZERO, |a, &v| a + v);
        }
        // dW = dOut cols^T
        S::gemm(cl.cout, n, k, &d_out, n as isize, 1, &cache.cols, 1, n as isize, S::ONE, &mut grads[cl.w..cl.w + cl.cout * k], k as isize, 1);
        if li == 0 {
            break;
        }
        // dCols = W^T dOut
        let mut d_cols = vec![S::ZERO; k * n];
        S::gemm(k, cl.cout, n, &params[cl.w..cl.w + cl.cout * k], 1, k as isize, &d_out, n as isize, 1, S::ZERO, &mut d_cols, n as isize, 1);
        let mut d_in = vec![S::ZERO; cl.cin * batch * cl.size_in * cl.size_in];
        col2im(&d_cols, cl.cin, batch, cl.size_in, &mut d_in);
        d_out = d_in;
    }
}
