//! Independent oracles shared by the integration tests and the acceptance
//! suite. Each one is written directly from the defining formulas, without
//! calling into the library.
#![allow(dead_code)]

/// Second, independent rendering of the Slaney filterbank: explicit
/// piecewise triangles evaluated from band-edge frequencies computed with
/// base-10 logarithms.
pub mod mel {
    pub fn mel(hz: f64) -> f64 {
        if hz < 1000.0 {
            3.0 * hz / 200.0
        } else {
            15.0 + 27.0 * (hz / 1000.0).log10() / 6.4f64.log10()
        }
    }

    pub fn hz(mel: f64) -> f64 {
        if mel < 15.0 {
            200.0 * mel / 3.0
        } else {
            1000.0 * 6.4f64.powf((mel - 15.0) / 27.0)
        }
    }

    pub fn edges(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
        let (a, b) = (mel(fmin), mel(fmax));
        let step = (b - a) / (n_mels + 1) as f64;
        (0..n_mels + 2).map(|i| hz(a + step * i as f64)).collect()
    }

    pub fn matrix(sr: f64, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
        let e = edges(n_mels, fmin, fmax);
        (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (e[m], e[m + 1], e[m + 2]);
                (0..=n_fft / 2)
                    .map(|k| {
                        let f = k as f64 * sr / n_fft as f64;
                        let tri = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        tri * 2.0 / (hi - lo)
                    })
                    .collect()
            })
            .collect()
    }
}

pub mod optim {
    /// Scalar RAdam recurrences written out directly.
    pub struct RadamOracle {
        pub m: f64,
        pub v: f64,
    }

    impl RadamOracle {
        pub fn radam(&mut self, g: f64, t: u64, lr: f64) -> f64 {
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let m_hat = self.m / (1.0 - b1.powi(t as i32));
            let rho_inf = 2.0 / (1.0 - b2) - 1.0;
            let rho = rho_inf - 2.0 * t as f64 * b2.powi(t as i32) / (1.0 - b2.powi(t as i32));
            if rho > 4.0 {
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                lr * r * m_hat / ((self.v / (1.0 - b2.powi(t as i32))).sqrt() + eps)
            } else {
                lr * m_hat
            }
        }
    }

    /// Scalar Ralamb (+ optional Lookahead `(k, α)`) trajectory under a
    /// fixed gradient sequence, default hyperparameters otherwise.
    pub fn ralamb_trajectory(p0: f64, grads: &[f64], wd: f64, lookahead: Option<(u64, f64)>) -> Vec<f64> {
        let mut o = RadamOracle { m: 0.0, v: 0.0 };
        let (mut fast, mut slow) = (p0, p0);
        let mut out = Vec::with_capacity(grads.len());
        for (i, &g) in grads.iter().enumerate() {
            let t = i as u64 + 1;
            let u = o.radam(g, t, 1e-3) + wd * fast;
            let trust = if fast == 0.0 || u == 0.0 { 1.0 } else { (fast.abs() / (u.abs() + 1e-8)).min(10.0) };
            fast -= trust * u;
            if let Some((k, alpha)) = lookahead {
                if t % k == 0 {
                    slow += alpha * (fast - slow);
                    fast = slow;
                }
            }
            out.push(fast);
        }
        out
    }
}

/// Brute-force precision/recall by counting every pair at every threshold.
pub mod metrics {
    /// `(threshold, precision, recall)` at each distinct score, high to low.
    pub fn curve(scores: &[f64], labels: &[bool]) -> Option<Vec<(f64, f64, f64)>> {
        let positives = labels.iter().filter(|&&y| y).count();
        if positives == 0 {
            return None;
        }
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let points = thresholds
            .into_iter()
            .map(|th| {
                let mut tp = 0usize;
                let mut fp = 0usize;
                for (&s, &y) in scores.iter().zip(labels) {
                    if s >= th {
                        if y {
                            tp += 1
                        } else {
                            fp += 1
                        }
                    }
                }
                (th, tp as f64 / (tp + fp) as f64, tp as f64 / positives as f64)
            })
            .collect();
        Some(points)
    }

    /// Step-wise average precision of [`curve`].
    pub fn ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let pts = curve(scores, labels)?;
        let mut prev = 0.0;
        let mut total = 0.0;
        for (_, p, r) in pts {
            total += (r - prev) * p;
            prev = r;
        }
        Some(total)
    }

    /// F1 of the predictions `score ≥ tau`.
    pub fn f1(scores: &[f64], labels: &[bool], tau: f64) -> f64 {
        let tp = scores.iter().zip(labels).filter(|(&s, &y)| s >= tau && y).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(&s, &y)| s >= tau && !y).count() as f64;
        let fneg = scores.iter().zip(labels).filter(|(&s, &y)| s < tau && y).count() as f64;
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    /// Every multiset of `n` items drawn from `0..kinds`, as sorted index lists.
    pub fn multisets(kinds: usize, n: usize) -> Vec<Vec<usize>> {
        fn rec(kinds: usize, n: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == n {
                out.push(cur.clone());
                return;
            }
            for k in start..kinds {
                cur.push(k);
                rec(kinds, n, k, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(kinds, n, 0, &mut Vec::new(), &mut out);
        out
    }
}

/// Direct rendering of one gated recurrent step, gate order (r, z, n).
pub mod gru {
    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// `w_ih` is `input × 3H`, `w_hh` is `H × 3H`, both row-major.
    pub fn step(x: &[f64], h: &[f64], w_ih: &[f64], w_hh: &[f64], b_ih: &[f64], b_hh: &[f64]) -> Vec<f64> {
        let hd = h.len();
        let col = |w: &[f64], v: &[f64], j: usize| -> f64 { v.iter().enumerate().map(|(i, vi)| vi * w[i * 3 * hd + j]).sum() };
        (0..hd)
            .map(|j| {
                let r = sig(col(w_ih, x, j) + b_ih[j] + col(w_hh, h, j) + b_hh[j]);
                let z = sig(col(w_ih, x, hd + j) + b_ih[hd + j] + col(w_hh, h, hd + j) + b_hh[hd + j]);
                let n = (col(w_ih, x, 2 * hd + j) + b_ih[2 * hd + j] + r * (col(w_hh, h, 2 * hd + j) + b_hh[2 * hd + j])).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect()
    }
}
