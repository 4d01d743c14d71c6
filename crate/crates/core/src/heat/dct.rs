//! Orthonormal separable 2-D DCT-II and its inverse (DCT-III).
//!
//! Both transforms are dense matrix products `D_H · X · D_Wᵀ`, applied per
//! channel to `(H, W)` or `(C, H, W)` tensors. Basis matrices are cached per
//! thread.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::nn::tensor::{gemm, Tensor};

struct Basis {
    /// `d[k * n + i] = α_k cos(π (2i + 1) k / 2n)`
    d: Vec<f64>,
    dt: Vec<f64>,
}

thread_local! {
    static BASES: RefCell<HashMap<usize, Arc<Basis>>> = RefCell::new(HashMap::new());
}

fn basis(n: usize) -> Arc<Basis> {
    BASES.with(|b| {
        b.borrow_mut()
            .entry(n)
            .or_insert_with(|| {
                let mut d = vec![0.0; n * n];
                for k in 0..n {
                    let alpha = if k == 0 {
                        (1.0 / n as f64).sqrt()
                    } else {
                        (2.0 / n as f64).sqrt()
                    };
                    for i in 0..n {
                        d[k * n + i] =
                            alpha * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
                    }
                }
                let mut dt = vec![0.0; n * n];
                for k in 0..n {
                    for i in 0..n {
                        dt[i * n + k] = d[k * n + i];
                    }
                }
                Arc::new(Basis { d, dt })
            })
            .clone()
    })
}

/// The orthonormal DCT-II matrix of size `n × n`, row `k` is the k-th basis vector.
pub fn dct_matrix(n: usize) -> Tensor {
    Tensor::from_vec(&[n, n], basis(n).d.clone()).expect("square basis")
}

fn split_hw(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w] if h > 0 && w > 0 => Ok((1, h, w)),
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        _ => shape_err(format!("dct expects (H,W) or (C,H,W), got {:?}", x.shape())),
    }
}

fn separable(x: &Tensor, inverse: bool) -> Result<Tensor> {
    let (c, h, w) = split_hw(x)?;
    let bh = basis(h);
    let bw = basis(w);
    // forward: Y = D_H X D_Wᵀ ; inverse: X = D_Hᵀ Y D_W
    let (left, right) = if inverse {
        (&bh.dt, &bw.d)
    } else {
        (&bh.d, &bw.dt)
    };
    let mut out = vec![0.0; x.len()];
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        tmp.iter_mut().for_each(|v| *v = 0.0);
        gemm(src, right, &mut tmp, h, w, w);
        gemm(left, &tmp, &mut out[ch * h * w..(ch + 1) * h * w], h, h, w);
    }
    Tensor::from_vec(x.shape(), out)
}

/// Orthonormal 2-D DCT-II over the last two axes.
pub fn dct2(x: &Tensor) -> Result<Tensor> {
    separable(x, false)
}

/// Exact inverse of [`dct2`].
pub fn idct2(x: &Tensor) -> Result<Tensor> {
    separable(x, true)
}

/// Squared angular frequencies `(π i / H)² + (π j / W)²` of the DCT-II
/// basis, i.e. the Neumann-Laplacian eigenvalues it diagonalizes.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    h: usize,
    w: usize,
    w2: Tensor,
}

impl FrequencyGrid {
    pub fn new(h: usize, w: usize) -> Self {
        let w2 = Tensor::from_fn(&[h, w], |idx| {
            let (i, j) = (idx / w, idx % w);
            let a = PI * i as f64 / h as f64;
            let b = PI * j as f64 / w as f64;
            a * a + b * b
        });
        FrequencyGrid { h, w, w2 }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn w2(&self) -> &Tensor {
        &self.w2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_is_dc_only() {
        let (h, w, c) = (4, 6, 2.5);
        let y = dct2(&Tensor::full(&[h, w], c)).unwrap();
        assert!((y.get(&[0, 0]) - c * ((h * w) as f64).sqrt()).abs() < 1e-12);
        for (i, v) in y.data().iter().enumerate().skip(1) {
            assert!(v.abs() < 1e-12, "coef {i} = {v}");
        }
    }

    #[test]
    fn roundtrip_multichannel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[3, 5, 7], |_| rng.gen_range(-1.0..1.0));
        let back = idct2(&dct2(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn basis_rows_orthonormal() {
        let d = dct_matrix(9);
        let g = d.matmul(&d.transpose()).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g.get(&[i, j]) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_is_monotone() {
        let fg = FrequencyGrid::new(5, 8);
        assert_eq!(fg.w2().get(&[0, 0]), 0.0);
        for i in 0..5 {
            for j in 1..8 {
                assert!(fg.w2().get(&[i, j]) >= fg.w2().get(&[i, j - 1]));
            }
        }
        for i in 1..5 {
            assert!(fg.w2().get(&[i, 0]) >= fg.w2().get(&[i - 1, 0]));
        }
    }

    #[test]
    fn rejects_bad_rank() {
        assert!(dct2(&Tensor::zeros(&[4])).is_err());
        assert!(dct2(&Tensor::zeros(&[1, 2, 3, 4])).is_err());
    }
}
