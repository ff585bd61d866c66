//! The selective-state recurrence `h(t) = A(t) h(t-1) + u(t)`, evaluated
//! both as a literal left-to-right loop and as a Blelloch-style parallel
//! scan over the affine-map monoid.

use crate::error::{MqError, Result};
use crate::tensor::Tensor;

/// Inputs to the recurrence, laid out per token.
///
/// `a_bar` and `b_bar_x` are `[T, d_inner, d_state]`; `c_bar` is
/// `[T, d_state]` (shared across inner channels); `h0` is
/// `[d_inner, d_state]`.
#[derive(Debug, Clone)]
pub struct ScanInputs {
    pub a_bar: Tensor,
    pub b_bar_x: Tensor,
    pub c_bar: Tensor,
    pub h0: Tensor,
}

/// Hidden states `[T, d_inner, d_state]` and mixed outputs `[T, d_inner]`.
#[derive(Debug, Clone)]
pub struct ScanOutput {
    pub h: Tensor,
    pub y: Tensor,
}

impl ScanInputs {
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let sa = self.a_bar.shape();
        if sa.len() != 3 {
            return Err(MqError::shape("scan a_bar must be rank 3", sa, &[]));
        }
        let (t, e, n) = (sa[0], sa[1], sa[2]);
        if self.b_bar_x.shape() != [t, e, n] {
            return Err(MqError::shape("scan b_bar_x", self.b_bar_x.shape(), sa));
        }
        if self.c_bar.shape() != [t, n] {
            return Err(MqError::shape("scan c_bar", self.c_bar.shape(), &[t, n]));
        }
        if self.h0.shape() != [e, n] {
            return Err(MqError::shape("scan h0", self.h0.shape(), &[e, n]));
        }
        Ok((t, e, n))
    }

    fn mix_outputs(&self, h: &Tensor, t: usize, e: usize, n: usize) -> Tensor {
        let mut y = Tensor::zeros(vec![t, e]);
        let hd = h.data();
        let cd = self.c_bar.data();
        let yd = y.data_mut();
        for ti in 0..t {
            let crow = &cd[ti * n..(ti + 1) * n];
            for ei in 0..e {
                let hrow = &hd[(ti * e + ei) * n..(ti * e + ei + 1) * n];
                let mut acc = 0.0;
                for ni in 0..n {
                    acc += crow[ni] * hrow[ni];
                }
                yd[ti * e + ei] = acc;
            }
        }
        y
    }
}

/// Literal left-to-right evaluation of the recurrence.
pub fn pscan_sequential(s: &ScanInputs) -> Result<ScanOutput> {
    let (t, e, n) = s.dims()?;
    let lanes = e * n;
    let mut h = Tensor::zeros(vec![t, e, n]);
    let mut prev: Vec<f64> = s.h0.data().to_vec();
    let ad = s.a_bar.data();
    let bd = s.b_bar_x.data();
    {
        let hd = h.data_mut();
        for ti in 0..t {
            let base = ti * lanes;
            for l in 0..lanes {
                let v = ad[base + l] * prev[l] + bd[base + l];
                hd[base + l] = v;
                prev[l] = v;
            }
        }
    }
    let y = s.mix_outputs(&h, t, e, n);
    Ok(ScanOutput { h, y })
}

/// One scan element: the affine map `h -> a (*) h + b` over all lanes.
struct AffineElem {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// `later(earlier(h))`: (a2, b2) o (a1, b1) = (a2*a1, a2*b1 + b2).
fn compose(later: &AffineElem, earlier: &AffineElem) -> AffineElem {
    let mut a = vec![0.0; later.a.len()];
    let mut b = vec![0.0; later.a.len()];
    for l in 0..a.len() {
        a[l] = later.a[l] * earlier.a[l];
        b[l] = later.a[l] * earlier.b[l] + later.b[l];
    }
    AffineElem { a, b }
}

/// Blelloch up-sweep/down-sweep evaluation of the same recurrence.
///
/// The length is padded to a power of two with identity maps; the
/// down-sweep produces exclusive prefixes which are then composed with each
/// element to give the inclusive map applied to `h0`.
pub fn pscan_parallel(s: &ScanInputs) -> Result<ScanOutput> {
    let (t, e, n) = s.dims()?;
    let lanes = e * n;
    let p2 = t.next_power_of_two();
    let ad = s.a_bar.data();
    let bd = s.b_bar_x.data();

    let mut tree: Vec<AffineElem> = (0..p2)
        .map(|ti| {
            if ti < t {
                AffineElem {
                    a: ad[ti * lanes..(ti + 1) * lanes].to_vec(),
                    b: bd[ti * lanes..(ti + 1) * lanes].to_vec(),
                }
            } else {
                AffineElem { a: vec![1.0; lanes], b: vec![0.0; lanes] }
            }
        })
        .collect();
    // keep the leaf maps: the down-sweep overwrites the tree in place
    let leaves: Vec<AffineElem> = tree
        .iter()
        .take(t)
        .map(|el| AffineElem { a: el.a.clone(), b: el.b.clone() })
        .collect();

    // up-sweep: each stride-2^{d+1} node accumulates its range composition
    let mut half = 1;
    while half < p2 {
        let step = half * 2;
        let mut i = 0;
        while i < p2 {
            let lo = i + half - 1;
            let hi = i + step - 1;
            let combined = compose(&tree[hi], &tree[lo]);
            tree[hi] = combined;
            i += step;
        }
        half = step;
    }

    // down-sweep: exclusive prefixes
    tree[p2 - 1] = AffineElem { a: vec![1.0; lanes], b: vec![0.0; lanes] };
    let mut half = p2 / 2;
    while half >= 1 {
        let step = half * 2;
        let mut i = 0;
        while i < p2 {
            let lo = i + half - 1;
            let hi = i + step - 1;
            let left_total = std::mem::replace(
                &mut tree[lo],
                AffineElem { a: Vec::new(), b: Vec::new() },
            );
            tree[lo] = AffineElem { a: tree[hi].a.clone(), b: tree[hi].b.clone() };
            tree[hi] = compose(&left_total, &tree[hi]);
            i += step;
        }
        half /= 2;
    }

    let mut h = Tensor::zeros(vec![t, e, n]);
    let h0 = s.h0.data();
    {
        let hd = h.data_mut();
        for ti in 0..t {
            let inclusive = compose(&leaves[ti], &tree[ti]);
            let base = ti * lanes;
            for l in 0..lanes {
                hd[base + l] = inclusive.a[l] * h0[l] + inclusive.b[l];
            }
        }
    }
    let y = s.mix_outputs(&h, t, e, n);
    Ok(ScanOutput { h, y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256PlusPlus;
    use proptest::prelude::*;

    pub(crate) fn random_inputs(
        rng: &mut Xoshiro256PlusPlus,
        t: usize,
        e: usize,
        n: usize,
        with_h0: bool,
    ) -> ScanInputs {
        let fill = |rng: &mut Xoshiro256PlusPlus, len: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..len).map(|_| rng.uniform(lo, hi)).collect()
        };
        ScanInputs {
            a_bar: Tensor::from_vec(vec![t, e, n], fill(rng, t * e * n, 0.0, 1.0)).unwrap(),
            b_bar_x: Tensor::from_vec(vec![t, e, n], fill(rng, t * e * n, -1.0, 1.0)).unwrap(),
            c_bar: Tensor::from_vec(vec![t, n], fill(rng, t * n, -1.0, 1.0)).unwrap(),
            h0: if with_h0 {
                Tensor::from_vec(vec![e, n], fill(rng, e * n, -1.0, 1.0)).unwrap()
            } else {
                Tensor::zeros(vec![e, n])
            },
        }
    }

    fn constant_inputs(t: usize, a: f64, c: f64, h0v: f64) -> ScanInputs {
        let (e, n) = (2, 3);
        ScanInputs {
            a_bar: Tensor::from_vec(vec![t, e, n], vec![a; t * e * n]).unwrap(),
            b_bar_x: Tensor::from_vec(vec![t, e, n], vec![c; t * e * n]).unwrap(),
            c_bar: Tensor::from_vec(vec![t, n], vec![1.0; t * n]).unwrap(),
            h0: Tensor::from_vec(vec![e, n], vec![h0v; e * n]).unwrap(),
        }
    }

    #[test]
    fn zero_decay_copies_inputs() {
        let s = constant_inputs(5, 0.0, 0.7, 3.0);
        let out = pscan_sequential(&s).unwrap();
        for &v in out.h.data() {
            assert_eq!(v, 0.7);
        }
    }

    #[test]
    fn unit_decay_telescopes() {
        let s = constant_inputs(6, 1.0, 0.5, 2.0);
        let out = pscan_sequential(&s).unwrap();
        for ti in 0..6 {
            let expect = 2.0 + (ti + 1) as f64 * 0.5;
            let v = out.h.data()[ti * 6];
            assert!((v - expect).abs() < 1e-12);
        }
    }

    // geometric series closed form: h(T) = c (1 - a^T) / (1 - a) with h0 = 0
    #[test]
    fn geometric_series_closed_form() {
        let (a, c, t) = (0.625, 0.3, 20usize);
        let s = constant_inputs(t, a, c, 0.0);
        let out = pscan_sequential(&s).unwrap();
        let expect = c * (1.0 - a.powi(t as i32)) / (1.0 - a);
        let v = out.h.data()[(t - 1) * 6];
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn parallel_equals_sequential_t1() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(31);
        let s = random_inputs(&mut rng, 1, 3, 2, true);
        let a = pscan_sequential(&s).unwrap();
        let b = pscan_parallel(&s).unwrap();
        assert_eq!(a.h.data(), b.h.data());
    }

    #[test]
    fn parallel_equals_sequential_various_lengths() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(32);
        for t in [2usize, 7, 16, 33, 64, 65] {
            let s = random_inputs(&mut rng, t, 4, 3, true);
            let a = pscan_sequential(&s).unwrap();
            let b = pscan_parallel(&s).unwrap();
            let worst = a
                .h
                .data()
                .iter()
                .zip(b.h.data())
                .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()));
            assert!(worst <= 1e-12, "T={t}: {worst}");
        }
    }

    #[test]
    fn linear_in_driving_term() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(33);
        let base = random_inputs(&mut rng, 12, 3, 4, false);
        let u = random_inputs(&mut rng, 12, 3, 4, false);
        let (alpha, beta) = (0.7, -1.3);
        let mut combined = base.clone();
        for (dst, (&a, &b)) in combined
            .b_bar_x
            .data_mut()
            .iter_mut()
            .zip(base.b_bar_x.data().iter().zip(u.b_bar_x.data()))
        {
            *dst = alpha * a + beta * b;
        }
        let mut with_u = base.clone();
        with_u.b_bar_x = u.b_bar_x.clone();
        let out_c = pscan_sequential(&combined).unwrap();
        let out_a = pscan_sequential(&base).unwrap();
        let out_b = pscan_sequential(&with_u).unwrap();
        for ((c, a), b) in out_c.h.data().iter().zip(out_a.h.data()).zip(out_b.h.data()) {
            assert!((c - (alpha * a + beta * b)).abs() < 1e-11);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = constant_inputs(4, 0.5, 0.1, 0.0);
        s.c_bar = Tensor::zeros(vec![4, 7]);
        assert!(pscan_sequential(&s).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn parallel_matches_sequential(seed in 0u64..1_000_000, t in 1usize..66) {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let s = random_inputs(&mut rng, t, 3, 4, true);
            let a = pscan_sequential(&s).unwrap();
            let b = pscan_parallel(&s).unwrap();
            for (x, y) in a.h.data().iter().zip(b.h.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            for (x, y) in a.y.data().iter().zip(b.y.data()) {
                prop_assert!((x - y).abs() <= 1e-11);
            }
        }
    }
}
