//! Inner loops for the heavy operations. The ikj ordering keeps the
//! innermost loop contiguous so the compiler can vectorize it; the
//! accumulation order is fixed, which the determinism guarantees rely on.

/// c[M,N] = a[M,K] * b[K,N], f64 accumulation.
pub fn mm_f64(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        row.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aik = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// Same product computed in f32; used on the single-precision path.
pub fn mm_f32(a: &[f32], b: &[f32], c: &mut [f64], m: usize, k: usize, n: usize) {
    let mut row32 = vec![0f32; n];
    for i in 0..m {
        row32.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aik = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row32.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
        for (dst, src) in c[i * n..(i + 1) * n].iter_mut().zip(&row32) {
            *dst = *src as f64;
        }
    }
}

/// da[M,K] += g[M,N] * b[K,N]^T
pub fn mm_acc_a_bt_f64(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            da[i * k + p] += s;
        }
    }
}

pub fn mm_acc_a_bt_f32(g: &[f32], b: &[f32], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0f32;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            da[i * k + p] += s as f64;
        }
    }
}

/// db[K,N] += a[M,K]^T * g[M,N]
pub fn mm_acc_at_b_f64(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            let drow = &mut db[p * n..(p + 1) * n];
            for (dv, gv) in drow.iter_mut().zip(grow) {
                *dv += aik * gv;
            }
        }
    }
}

pub fn mm_acc_at_b_f32(a: &[f32], g: &[f32], db: &mut [f64], m: usize, k: usize, n: usize) {
    // f32 multiplies accumulated into the f64 buffer; each (p, j) cell is
    // touched once per i in a fixed order, so this stays deterministic.
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            let drow = &mut db[p * n..(p + 1) * n];
            for (dv, gv) in drow.iter_mut().zip(grow) {
                *dv += (aik * gv) as f64;
            }
        }
    }
}

pub fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
