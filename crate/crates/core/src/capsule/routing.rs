//! Iterative collaborative routing for a single (deeper capsule, group
//! position) problem, and its vector-Jacobian product.
//!
//! Given predictions `P_0..P_{N-1}` (each of dimension `d`):
//!
//! 1. `A_ik = P_i·P_k / (|P_i| |P_k|)`, each norm floored at `eps`;
//! 2. `D_i = Σ_k A_ik` (self-affinity included);
//! 3. `KN_i` = the `k` largest off-diagonal affinities of row `i`, ties to
//!    the lowest index;
//! 4. `num_iter` synchronous updates `D_i ← mean_{m ∈ KN_i} D_m`, with the
//!    neighbour lists kept from step 3;
//! 5. `c = softmax(D)`.

/// Per-problem outputs, written into caller-owned slices.
pub(crate) struct SolutionMut<'a> {
    /// `N × N` affinities.
    pub a: &'a mut [f64],
    /// `N × k` neighbour ids.
    pub kn: &'a mut [usize],
    /// Final centralities.
    pub dcen: &'a mut [f64],
    /// Routing weights.
    pub c: &'a mut [f64],
    /// Unit-normalised predictions `P_i / max(|P_i|, eps)`, `N × d`.
    pub u: &'a mut [f64],
    /// Unfloored prediction norms.
    pub norms: &'a mut [f64],
}

/// What the backward pass needs from a forward solve.
pub(crate) struct SolutionRef<'a> {
    pub kn: &'a [usize],
    pub c: &'a [f64],
    pub u: &'a [f64],
    pub norms: &'a [f64],
}

/// Reusable buffers sized for `N` predictions.
#[derive(Default)]
pub(crate) struct Scratch {
    taken: Vec<bool>,
    prev: Vec<f64>,
    dd: Vec<f64>,
    du: Vec<f64>,
}

impl Scratch {
    fn fit(&mut self, n: usize, d: usize) {
        self.taken.resize(n, false);
        self.prev.resize(n, 0.0);
        self.dd.resize(n, 0.0);
        self.du.resize(d, 0.0);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_into(
    p: &[f64],
    n: usize,
    d: usize,
    k: usize,
    num_iter: usize,
    eps: f64,
    out: SolutionMut<'_>,
    scratch: &mut Scratch,
) {
    debug_assert_eq!(p.len(), n * d);
    scratch.fit(n, d);
    let SolutionMut {
        a,
        kn,
        dcen,
        c,
        u,
        norms,
    } = out;
    for i in 0..n {
        let row = &p[i * d..(i + 1) * d];
        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms[i] = nrm;
        let s = nrm.max(eps);
        for (uv, pv) in u[i * d..(i + 1) * d].iter_mut().zip(row) {
            *uv = pv / s;
        }
    }
    for i in 0..n {
        for m in i..n {
            let dot: f64 = u[i * d..(i + 1) * d]
                .iter()
                .zip(&u[m * d..(m + 1) * d])
                .map(|(x, y)| x * y)
                .sum();
            a[i * n + m] = dot;
            a[m * n + i] = dot;
        }
    }
    for i in 0..n {
        dcen[i] = a[i * n..(i + 1) * n].iter().sum();
    }

    let taken = &mut scratch.taken;
    for i in 0..n {
        taken.iter_mut().for_each(|t| *t = false);
        taken[i] = true;
        let row = &a[i * n..(i + 1) * n];
        for q in 0..k {
            // Strict comparison keeps the lowest index among equal affinities.
            let mut best = usize::MAX;
            for m in 0..n {
                if !taken[m] && (best == usize::MAX || row[m].total_cmp(&row[best]).is_gt()) {
                    best = m;
                }
            }
            taken[best] = true;
            kn[i * k + q] = best;
        }
    }

    let inv_k = 1.0 / k as f64;
    let prev = &mut scratch.prev;
    for _ in 0..num_iter {
        prev.copy_from_slice(dcen);
        for i in 0..n {
            dcen[i] = kn[i * k..(i + 1) * k].iter().map(|&m| prev[m]).sum::<f64>() * inv_k;
        }
    }

    let mx = dcen.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (cv, dv) in c.iter_mut().zip(dcen.iter()) {
        *cv = (dv - mx).exp();
        z += *cv;
    }
    c.iter_mut().for_each(|v| *v /= z);
}

/// Owned result of [`solve`].
#[cfg(test)]
#[derive(Clone, Debug)]
pub(crate) struct Solution {
    pub a: Vec<f64>,
    pub kn: Vec<usize>,
    pub dcen: Vec<f64>,
    pub c: Vec<f64>,
    pub u: Vec<f64>,
    pub norms: Vec<f64>,
}

#[cfg(test)]
impl Solution {
    pub fn view(&self) -> SolutionRef<'_> {
        SolutionRef {
            kn: &self.kn,
            c: &self.c,
            u: &self.u,
            norms: &self.norms,
        }
    }
}

#[cfg(test)]
pub(crate) fn solve(p: &[f64], n: usize, d: usize, k: usize, num_iter: usize, eps: f64) -> Solution {
    let mut s = Solution {
        a: vec![0.0; n * n],
        kn: vec![0; n * k],
        dcen: vec![0.0; n],
        c: vec![0.0; n],
        u: vec![0.0; n * d],
        norms: vec![0.0; n],
    };
    let out = SolutionMut {
        a: &mut s.a,
        kn: &mut s.kn,
        dcen: &mut s.dcen,
        c: &mut s.c,
        u: &mut s.u,
        norms: &mut s.norms,
    };
    solve_into(p, n, d, k, num_iter, eps, out, &mut Scratch::default());
    s
}

/// Gradient of `s = Σ_i c_i P_i` with respect to the predictions, given
/// `ds`, written to `dp`. Flows through both the weights `c` and the direct
/// term; neighbour selection is treated as piecewise constant.
#[allow(clippy::too_many_arguments)]
pub(crate) fn weighted_sum_backward(
    p: &[f64],
    sol: SolutionRef<'_>,
    ds: &[f64],
    n: usize,
    d: usize,
    k: usize,
    num_iter: usize,
    eps: f64,
    dp: &mut [f64],
    scratch: &mut Scratch,
) {
    scratch.fit(n, d);
    let Scratch { prev, dd, du, .. } = scratch;
    for i in 0..n {
        let row = &p[i * d..(i + 1) * d];
        // dd holds dL/dc until the softmax step.
        dd[i] = row.iter().zip(ds).map(|(a, b)| a * b).sum();
        for (g, s) in dp[i * d..(i + 1) * d].iter_mut().zip(ds) {
            *g = sol.c[i] * s;
        }
    }
    // Softmax.
    let cdc: f64 = sol.c.iter().zip(dd.iter()).map(|(a, b)| a * b).sum();
    for i in 0..n {
        dd[i] = sol.c[i] * (dd[i] - cdc);
    }
    // Transposed neighbour averaging.
    let inv_k = 1.0 / k as f64;
    for _ in 0..num_iter {
        prev.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            for &m in &sol.kn[i * k..(i + 1) * k] {
                prev[m] += dd[i] * inv_k;
            }
        }
        dd.copy_from_slice(prev);
    }
    // D_i = Σ_m A_im, so dA_im = dD_i; A = U Uᵀ gives dU_i = Σ_m (dA_im + dA_mi) u_m.
    let u = sol.u;
    for i in 0..n {
        du.iter_mut().for_each(|v| *v = 0.0);
        for m in 0..n {
            let w = dd[i] + dd[m];
            for (g, uv) in du.iter_mut().zip(&u[m * d..(m + 1) * d]) {
                *g += w * uv;
            }
        }
        let ui = &u[i * d..(i + 1) * d];
        let nrm = sol.norms[i];
        let out = &mut dp[i * d..(i + 1) * d];
        if nrm > eps {
            let proj: f64 = ui.iter().zip(du.iter()).map(|(a, b)| a * b).sum();
            for ((o, g), uv) in out.iter_mut().zip(du.iter()).zip(ui) {
                *o += (g - uv * proj) / nrm;
            }
        } else {
            for (o, g) in out.iter_mut().zip(du.iter()) {
                *o += g / eps;
            }
        }
    }
}

/// `squash(v) = (|v|² / (1 + |v|²)) · v / |v|`, with `|v|` smoothed as
/// `sqrt(|v|² + 1e-16)` so that the zero vector maps to zero.
pub fn squash(v: &[f64]) -> Vec<f64> {
    let n2: f64 = v.iter().map(|x| x * x).sum();
    let h = squash_factor(n2);
    v.iter().map(|x| x * h).collect()
}

pub(crate) const SQUASH_EPS: f64 = 1e-16;

pub(crate) fn squash_factor(n2: f64) -> f64 {
    n2 / ((1.0 + n2) * (n2 + SQUASH_EPS).sqrt())
}

/// d factor / d |v|².
pub(crate) fn squash_factor_slope(n2: f64) -> f64 {
    let e = n2 + SQUASH_EPS;
    (1.0 - n2 * (1.0 + n2) / (2.0 * e)) / ((1.0 + n2) * (1.0 + n2) * e.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_three_node_example() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let p = [1.0, 0.0, h, h, 0.0, 1.0];
        let s = solve(&p, 3, 2, 1, 1, 1e-8);
        assert_eq!(s.kn, vec![1, 0, 1]);
        let expect_a = [1.0, h, 0.0, h, 1.0, h, 0.0, h, 1.0];
        for (a, e) in s.a.iter().zip(expect_a) {
            assert!((a - e).abs() < 1e-12);
        }
        let d0 = 1.0 + h;
        let d1 = 1.0 + 2.0 * h;
        assert!((s.dcen[0] - d1).abs() < 1e-12 && (s.dcen[1] - d0).abs() < 1e-12);
        assert!((s.c[0] - 0.4011).abs() < 1e-3);
        assert!((s.c[1] - 0.1978).abs() < 1e-3);
        assert!((s.c[2] - 0.4011).abs() < 1e-3);
    }

    #[test]
    fn identical_predictions_route_uniformly() {
        let p: Vec<f64> = [0.3, -0.2, 0.9].repeat(5);
        for (k, it) in [(1, 0), (2, 3), (4, 1)] {
            let s = solve(&p, 5, 3, k, it, 1e-8);
            for c in &s.c {
                assert!((c - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_prediction_has_zero_affinity() {
        let p = [0.0, 0.0, 1.0, 2.0, -1.0, 0.5];
        let s = solve(&p, 3, 2, 1, 0, 1e-8);
        assert_eq!(s.a[1], 0.0);
        assert_eq!(s.a[2], 0.0);
        assert_eq!(s.a[0], 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (n, d, k, it, eps) = (5, 3, 2, 2, 1e-8);
        let p: Vec<f64> = (0..n * d).map(|i| ((i * 7919) % 23) as f64 / 11.0 - 1.0).collect();
        let ds = [0.3, -1.1, 0.7];
        let f = |p: &[f64]| -> f64 {
            let s = solve(p, n, d, k, it, eps);
            (0..d)
                .map(|q| ds[q] * (0..n).map(|i| s.c[i] * p[i * d + q]).sum::<f64>())
                .sum()
        };
        let sol = solve(&p, n, d, k, it, eps);
        let mut dp = vec![0.0; n * d];
        weighted_sum_backward(&p, sol.view(), &ds, n, d, k, it, eps, &mut dp, &mut Scratch::default());
        for j in 0..n * d {
            let (mut hi, mut lo) = (p.clone(), p.clone());
            hi[j] += 1e-6;
            lo[j] -= 1e-6;
            let fd = (f(&hi) - f(&lo)) / 2e-6;
            assert!((fd - dp[j]).abs() < 1e-6, "{j}: {fd} vs {}", dp[j]);
        }
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        let s = squash(&[3.0, 4.0]);
        assert!((s[0] - 25.0 / 26.0 * 0.6).abs() < 1e-12);
        assert!((s[1] - 25.0 / 26.0 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn squash_slope_matches_finite_difference() {
        for n2 in [0.01, 0.5, 2.0, 30.0] {
            let h = 1e-6;
            let fd = (squash_factor(n2 + h) - squash_factor(n2 - h)) / (2.0 * h);
            assert!((fd - squash_factor_slope(n2)).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
