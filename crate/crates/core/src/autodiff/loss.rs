//! Fused segmentation loss kernels over `[c, n]` probability fields.

use alloc::vec;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

const LOG_FLOOR: f64 = 1e-12;

fn chan2<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    let s = t.shape();
    assert!(!s.is_empty(), "expected a channelled tensor");
    (s[0], s[1..].iter().product())
}

impl<T: Scalar> Tape<T> {
    /// Soft Dice loss `1 - mean_c dice_c` between probabilities and a one-hot
    /// target, with the smoothing constant in both numerator and denominator
    /// so a perfect prediction scores exactly zero.
    pub fn soft_dice(&mut self, probs: Var, target: Var, smooth: T) -> Var {
        let (c, n) = chan2(self.value(probs));
        assert_eq!(self.value(target).shape(), self.value(probs).shape(), "dice target shape");
        let pv = self.value(probs).data();
        let tv = self.value(target).data();
        let mut nums = Vec::with_capacity(c);
        let mut dens = Vec::with_capacity(c);
        let two = T::from_f64c(2.0);
        for ch in 0..c {
            let pr = &pv[ch * n..(ch + 1) * n];
            let tr = &tv[ch * n..(ch + 1) * n];
            let mut dot = T::zero();
            let mut sp = T::zero();
            let mut st = T::zero();
            for (&p, &t) in pr.iter().zip(tr.iter()) {
                dot = dot + p * t;
                sp = sp + p;
                st = st + t;
            }
            nums.push(two * dot + smooth);
            dens.push(sp + st + smooth);
        }
        let inv_c = T::one() / T::from_f64c(c as f64);
        let mut dice = T::zero();
        for ch in 0..c {
            dice = dice + nums[ch] / dens[ch];
        }
        let loss = T::one() - dice * inv_c;
        self.push_op(Tensor::scalar(loss), &[probs, target], move |t, g| {
            let tv = t.value(target).data();
            let gs = g.item();
            let mut dp = vec![T::zero(); c * n];
            for ch in 0..c {
                let (num, den) = (nums[ch], dens[ch]);
                let inv_den2 = T::one() / (den * den);
                let tr = &tv[ch * n..(ch + 1) * n];
                let dr = &mut dp[ch * n..(ch + 1) * n];
                for (d, &tgt) in dr.iter_mut().zip(tr.iter()) {
                    *d = -gs * inv_c * (two * tgt * den - num) * inv_den2;
                }
            }
            vec![(probs, Tensor::from_vec(t.value(probs).shape(), dp).unwrap())]
        })
    }

    /// Cross-entropy between probabilities and a one-hot target, averaged
    /// over all positions. Probabilities are floored before the logarithm.
    pub fn ce_onehot(&mut self, probs: Var, target: Var) -> Var {
        let (c, n) = chan2(self.value(probs));
        assert_eq!(self.value(target).shape(), self.value(probs).shape(), "ce target shape");
        let pv = self.value(probs).data();
        let tv = self.value(target).data();
        let floor = T::from_f64c(LOG_FLOOR);
        let mut acc = T::zero();
        for (&p, &t) in pv.iter().zip(tv.iter()) {
            if t != T::zero() {
                acc = acc - t * p.max(floor).ln();
            }
        }
        let inv_n = T::one() / T::from_f64c(n as f64);
        let loss = acc * inv_n;
        self.push_op(Tensor::scalar(loss), &[probs, target], move |t, g| {
            let pv = t.value(probs).data();
            let tv = t.value(target).data();
            let gs = g.item();
            let mut dp = vec![T::zero(); c * n];
            for ((d, &p), &tgt) in dp.iter_mut().zip(pv.iter()).zip(tv.iter()) {
                if tgt != T::zero() && p >= floor {
                    *d = -gs * tgt * inv_n / p;
                }
            }
            vec![(probs, Tensor::from_vec(t.value(probs).shape(), dp).unwrap())]
        })
    }

    /// Equal-weight blend of soft Dice and cross-entropy — the supervised
    /// segmentation loss used throughout training. Exactly zero for a
    /// perfect prediction.
    pub fn dice_ce(&mut self, probs: Var, target: Var, smooth: T) -> Var {
        let d = self.soft_dice(probs, target, smooth);
        let c = self.ce_onehot(probs, target);
        let sum = self.add(d, c);
        self.scale(sum, T::from_f64c(0.5))
    }

    /// Negative log-likelihood of fixed class indices, gated per position and
    /// averaged over the full lattice (gated-out positions contribute zero).
    pub fn masked_nll(&mut self, probs: Var, classes: &[usize], mask: &[bool]) -> Var {
        let (c, n) = chan2(self.value(probs));
        assert_eq!(classes.len(), n, "masked_nll class count");
        assert_eq!(mask.len(), n, "masked_nll mask count");
        let pv = self.value(probs).data();
        let floor = T::from_f64c(LOG_FLOOR);
        let mut acc = T::zero();
        for i in 0..n {
            if mask[i] {
                debug_assert!(classes[i] < c);
                acc = acc - pv[classes[i] * n + i].max(floor).ln();
            }
        }
        let inv_n = T::one() / T::from_f64c(n as f64);
        let loss = acc * inv_n;
        let classes_own: Vec<usize> = classes.to_vec();
        let mask_own: Vec<bool> = mask.to_vec();
        self.push_op(Tensor::scalar(loss), &[probs], move |t, g| {
            let pv = t.value(probs).data();
            let gs = g.item();
            let mut dp = vec![T::zero(); c * n];
            for i in 0..n {
                if mask_own[i] {
                    let k = classes_own[i] * n + i;
                    if pv[k] >= floor {
                        dp[k] = -gs * inv_n / pv[k];
                    }
                }
            }
            vec![(probs, Tensor::from_vec(t.value(probs).shape(), dp).unwrap())]
        })
    }
}
