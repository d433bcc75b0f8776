//! Blocked matrix multiply with a fixed summation order.
//!
//! Every output element is accumulated as a chain of fused multiply-adds
//! `acc = fma(a[p], b[p], acc)` starting from `c`, strictly in increasing
//! inner index, so results equal a naive triple loop written the same way
//! bit for bit. Blocking only changes which elements are in flight, never the
//! order of additions into any single element.

const MR: usize = 4;
const NR: usize = 16;
const KC: usize = 256;
const NC: usize = 1024;

/// Strided read-only view of a matrix: element `(i, j)` lives at
/// `data[i * row_stride + j * col_stride]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// View of the transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.row_stride + j * self.col_stride]
    }
}

#[inline(always)]
fn micro_kernel(kc: usize, pa: &[f64], pb: &[f64], acc: &mut [[f64; NR]; MR]) {
    let mut local = *acc;
    for p in 0..kc {
        let a: &[f64; MR] = pa[p * MR..p * MR + MR].try_into().unwrap();
        let b: &[f64; NR] = pb[p * NR..p * NR + NR].try_into().unwrap();
        for i in 0..MR {
            for j in 0..NR {
                local[i][j] = a[i].mul_add(b[j], local[i][j]);
            }
        }
    }
    *acc = local;
}

/// `c += a * b` where `a` is `m x k`, `b` is `k x n` and `c` is row-major `m x n`.
pub(crate) fn gemm_acc(m: usize, n: usize, k: usize, a: MatRef, b: MatRef, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let mut pa = vec![0.0; m.div_ceil(MR) * MR * KC.min(k)];
    let mut pb = vec![0.0; NC.min(n).div_ceil(NR) * NR * KC.min(k)];
    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            for (jp, jr) in (0..nc).step_by(NR).enumerate() {
                let dst = &mut pb[jp * NR * kc..(jp + 1) * NR * kc];
                let width = NR.min(nc - jr);
                for p in 0..kc {
                    let row = &mut dst[p * NR..(p + 1) * NR];
                    for (j, slot) in row.iter_mut().enumerate() {
                        *slot = if j < width { b.at(pc + p, jc + jr + j) } else { 0.0 };
                    }
                }
            }
            for (ip, ir) in (0..m).step_by(MR).enumerate() {
                let dst = &mut pa[ip * MR * kc..(ip + 1) * MR * kc];
                let height = MR.min(m - ir);
                for p in 0..kc {
                    for i in 0..MR {
                        dst[p * MR + i] = if i < height { a.at(ir + i, pc + p) } else { 0.0 };
                    }
                }
            }
            for (jp, jr) in (0..nc).step_by(NR).enumerate() {
                let bp = &pb[jp * NR * kc..(jp + 1) * NR * kc];
                let width = NR.min(nc - jr);
                for (ip, ir) in (0..m).step_by(MR).enumerate() {
                    let ap = &pa[ip * MR * kc..(ip + 1) * MR * kc];
                    let height = MR.min(m - ir);
                    let mut acc = [[0.0; NR]; MR];
                    for (i, a) in acc.iter_mut().enumerate().take(height) {
                        let row = (ir + i) * n + jc + jr;
                        a[..width].copy_from_slice(&c[row..row + width]);
                    }
                    micro_kernel(kc, ap, bp, &mut acc);
                    for (i, a) in acc.iter().enumerate().take(height) {
                        let row = (ir + i) * n + jc + jr;
                        c[row..row + width].copy_from_slice(&a[..width]);
                    }
                }
            }
        }
    }
}
