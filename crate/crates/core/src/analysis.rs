//! Closed-form attempt theory and the stationary reservation Markov chain.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub channels: u32,
    pub free: u32,
    /// Demanded channels (DN).
    pub n: u32,
}

impl TheoryInputs {
    pub fn new(channels: u32, free: u32, n: u32) -> Result<Self> {
        if free > channels || n == 0 || n > channels {
            return Err(param(format!(
                "need 0 <= F <= C and 1 <= n <= C, got C={channels} F={free} n={n}"
            )));
        }
        Ok(Self { channels, free, n })
    }

    pub fn fraction(&self) -> f64 {
        self.free as f64 / self.channels as f64
    }
}

/// Expected free channels among `n` distinct random draws: `n f`.
pub fn expected_free_per_attempt_fdm(ti: &TheoryInputs) -> f64 {
    ti.n as f64 * ti.fraction()
}

/// Expected channels held after `k` attempts: `min(n, n k f)`.
pub fn reserved_after_k(ti: &TheoryInputs, k: u32) -> f64 {
    (ti.n as f64).min(ti.n as f64 * k as f64 * ti.fraction())
}

// Ceiling that ignores round-off just above an integer, e.g. 1/(1/3).
fn ceil_tol(x: f64) -> u32 {
    (x - 1e-9).ceil().max(1.0) as u32
}

fn check_fraction(f: f64) -> Result<()> {
    if f == 0.0 {
        return Err(Error::Divergent);
    }
    if !(0.0..=1.0).contains(&f) {
        return Err(param(format!("free fraction {f} outside (0, 1]")));
    }
    Ok(())
}

/// Expected attempts for FDM-FDMA: `ceil(1/f)`.
pub fn attempts_fdm(f: f64) -> Result<u32> {
    check_fraction(f)?;
    Ok(ceil_tol(1.0 / f))
}

/// Per-base yield of an OFDM probe triple `c, c+1, c+2`: `3f - f^2 + f^3`.
pub fn ofdm_yield_per_base(f: f64) -> f64 {
    3.0 * f - f * f + f * f * f
}

/// Expected free channels per OFDM attempt with `n` bases.
pub fn expected_free_per_attempt_ofdm(ti: &TheoryInputs) -> f64 {
    ti.n as f64 * ofdm_yield_per_base(ti.fraction())
}

/// Free channels credited for one probe triple: with the base free the run
/// extends contiguously from it; with the base blocked both followers count.
pub fn ofdm_triple_yield(c1: bool, c2: bool, c3: bool) -> u32 {
    if c1 {
        1 + c2 as u32 + (c2 && c3) as u32
    } else {
        c2 as u32 + c3 as u32
    }
}

/// Expected triple yield conditioned on the base channel's status:
/// `f^2 + f + 1` when free, `2f` when blocked.
pub fn ofdm_conditional_yield(base_free: bool, f: f64) -> f64 {
    if base_free {
        f * f + f + 1.0
    } else {
        2.0 * f
    }
}

/// Expected attempts for OFDM-FDMA: `ceil(1/(3f - f^2 + f^3))`.
pub fn attempts_ofdm(f: f64) -> Result<u32> {
    check_fraction(f)?;
    Ok(ceil_tol(1.0 / ofdm_yield_per_base(f)))
}

/// Rates of the reservation chain. `mu[i-1]` is the rate of reserving `i`
/// channels in one attempt; `t` is the message duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovParams {
    pub lambda: f64,
    pub sigma: f64,
    pub mu: Vec<f64>,
    pub t: f64,
    pub f_p: u32,
    pub f_s: u32,
}

impl MarkovParams {
    /// Same reservation rate for every batch size up to `n_max`.
    pub fn uniform(
        lambda: f64,
        sigma: f64,
        mu: f64,
        n_max: usize,
        t: f64,
        f_p: u32,
        f_s: u32,
    ) -> Self {
        Self {
            lambda,
            sigma,
            mu: vec![mu; n_max],
            t,
            f_p,
            f_s,
        }
    }

    pub fn f_total(&self) -> u32 {
        self.f_p + self.f_s
    }

    fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(param("n must be at least 1"));
        }
        if self.mu.len() < n {
            return Err(param(format!(
                "{} reservation rates given, {n} needed",
                self.mu.len()
            )));
        }
        if [self.lambda, self.sigma]
            .iter()
            .chain(&self.mu)
            .any(|&r| !(r >= 0.0) || !r.is_finite())
        {
            return Err(param("rates must be finite and non-negative"));
        }
        if !(self.t > 0.0) || !self.t.is_finite() {
            return Err(param(format!(
                "message duration must be positive, got {}",
                self.t
            )));
        }
        if self.f_total() == 0 {
            return Err(param("no free channels: reservation split undefined"));
        }
        Ok(())
    }
}

/// Stationary distribution over states `(k, k')` with `k` secondary and `k'`
/// primary channels reserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovSolution {
    pub n: usize,
    pub p: BTreeMap<(u32, u32), f64>,
    pub p_n: f64,
    pub gamma_n: f64,
    /// Infinity-norm residual of the solved linear system.
    pub residual: f64,
}

fn finish(n: usize, p: BTreeMap<(u32, u32), f64>, t: f64, residual: f64) -> MarkovSolution {
    let p_n: f64 = p
        .iter()
        .filter(|(&(k, kp), _)| (k + kp) as usize == n)
        .map(|(_, &v)| v)
        .sum();
    let gamma_n = t * (1.0 - p_n) / p_n;
    MarkovSolution {
        n,
        p,
        p_n,
        gamma_n,
        residual,
    }
}

/// Single-channel system in closed form.
pub fn markov_closed_form_1ch(params: &MarkovParams) -> Result<MarkovSolution> {
    params.validate(1)?;
    let inv_t = 1.0 / params.t;
    let f = params.f_total() as f64;
    let mu = params.mu[0];
    if mu == 0.0 {
        return Err(param("mu_1 must be positive"));
    }
    let primary = (params.f_p as f64 / f) * mu / (params.lambda + inv_t);
    let secondary = (params.f_s as f64 / f) * mu / inv_t;
    let p00 = 1.0 / (1.0 + primary + secondary);
    let p = BTreeMap::from([
        ((0, 0), p00),
        ((0, 1), primary * p00),
        ((1, 0), secondary * p00),
    ]);
    Ok(finish(1, p, params.t, 0.0))
}

fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// States `(k, k')` with `k + k' <= n`, in a fixed order.
pub fn markov_states(n: usize) -> Vec<(u32, u32)> {
    let n = n as u32;
    (0..=n)
        .flat_map(|k| (0..=n - k).map(move |kp| (k, kp)))
        .collect()
}

/// Builds the generator matrix of the `n`-channel chain. From a state with
/// `r > 0` channels still missing, all `r` are reserved in one attempt at
/// rate `mu_r`, split between the bands hypergeometrically; one primary
/// channel is reclaimed at rate `lambda`; incomplete non-idle states
/// terminate unsuccessfully at rate `sigma`; active states complete at `1/T`.
pub fn markov_generator(
    params: &MarkovParams,
    n: usize,
) -> Result<(Vec<(u32, u32)>, DMatrix<f64>)> {
    params.validate(n)?;
    let states = markov_states(n);
    let index: BTreeMap<(u32, u32), usize> =
        states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let size = states.len();
    let mut q = DMatrix::<f64>::zeros(size, size);
    let (fp, fs, ft) = (params.f_p, params.f_s, params.f_total());
    let n32 = n as u32;
    for (i, &(k, kp)) in states.iter().enumerate() {
        let r = n32 - k - kp;
        let mut add = |to: (u32, u32), rate: f64| {
            if rate > 0.0 {
                q[(i, index[&to])] += rate;
            }
        };
        if r > 0 {
            let mu = params.mu[r as usize - 1];
            let total = binomial(ft, r);
            for a in 0..=r {
                let w = binomial(fp, a) * binomial(fs, r - a) / total;
                add((k + r - a, kp + a), mu * w);
            }
            if (k, kp) != (0, 0) {
                add((0, 0), params.sigma);
            }
        } else {
            add((0, 0), 1.0 / params.t);
        }
        if kp > 0 {
            add((k, kp - 1), params.lambda);
        }
    }
    for i in 0..size {
        let out: f64 = (0..size).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
        q[(i, i)] = -out;
    }
    Ok((states, q))
}

/// Solves the stationary distribution of the `n`-channel chain.
pub fn markov_solve(params: &MarkovParams, n: usize) -> Result<MarkovSolution> {
    let (states, q) = markov_generator(params, n)?;
    let size = states.len();
    let mut a = q.transpose();
    for j in 0..size {
        a[(size - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(size);
    b[size - 1] = 1.0;
    let singular = |a: &DMatrix<f64>| {
        let sv = a.clone().singular_values();
        let (max, min) = (sv.max(), sv.min());
        Error::Singular {
            condition: if min == 0.0 { f64::INFINITY } else { max / min },
        }
    };
    let x = a.clone().lu().solve(&b).ok_or_else(|| singular(&a))?;
    let residual = (&a * &x - &b).amax();
    if !residual.is_finite() || residual >= 1e-9 {
        return Err(singular(&a));
    }
    let p = states.into_iter().zip(x.iter().copied()).collect();
    Ok(finish(n, p, params.t, residual))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1(inv_t: f64) -> MarkovParams {
        MarkovParams::uniform(0.3, 0.0, 0.7, 3, 1.0 / inv_t, 16, 23)
    }

    #[test]
    fn fdm_theory_examples() {
        let ti = TheoryInputs::new(1000, 500, 8).unwrap();
        assert_eq!(expected_free_per_attempt_fdm(&ti), 4.0);
        let ti = TheoryInputs::new(1000, 1000, 8).unwrap();
        assert_eq!(expected_free_per_attempt_fdm(&ti), 8.0);
        let ti = TheoryInputs::new(1000, 697, 8).unwrap();
        assert!((expected_free_per_attempt_fdm(&ti) - 5.576).abs() < 1e-12);
        assert!(TheoryInputs::new(10, 11, 1).is_err());
    }

    #[test]
    fn lemma_examples() {
        let ti = TheoryInputs::new(1000, 500, 8).unwrap();
        assert_eq!(reserved_after_k(&ti, 1), 4.0);
        assert_eq!(reserved_after_k(&ti, 3), 8.0);
        let ti = TheoryInputs::new(1000, 39, 8).unwrap();
        assert!((reserved_after_k(&ti, 13) - 4.056).abs() < 1e-9);
    }

    #[test]
    fn attempts_examples() {
        assert_eq!(attempts_fdm(0.697).unwrap(), 2);
        assert_eq!(attempts_fdm(1.0).unwrap(), 1);
        assert_eq!(attempts_fdm(0.039).unwrap(), 26);
        assert_eq!(attempts_fdm(1.0 / 3.0).unwrap(), 3);
        assert_eq!(attempts_fdm(0.0), Err(Error::Divergent));
        assert_eq!(attempts_ofdm(1185.0 / 2000.0).unwrap(), 1);
        assert_eq!(attempts_ofdm(211.0 / 2000.0).unwrap(), 4);
        assert_eq!(attempts_ofdm(21.0 / 2000.0).unwrap(), 32);
        assert_eq!(attempts_ofdm(0.0), Err(Error::Divergent));
    }

    #[test]
    fn ofdm_yield_examples() {
        let ti = TheoryInputs::new(2000, 21, 8).unwrap();
        assert!((expected_free_per_attempt_ofdm(&ti) - 0.2511).abs() < 1e-4);
        let ti = TheoryInputs::new(2000, 2000, 8).unwrap();
        assert_eq!(expected_free_per_attempt_ofdm(&ti), 24.0);
    }

    #[test]
    fn ofdm_status_table() {
        for f in [0.01, 0.2, 0.5, 0.9] {
            let mut by_base = [0.0f64; 2];
            let mut weight = [0.0f64; 2];
            for row in 0..8u32 {
                let (c1, c2, c3) = (row & 4 != 0, row & 2 != 0, row & 1 != 0);
                let prob = [c1, c2, c3]
                    .iter()
                    .map(|&s| if s { f } else { 1.0 - f })
                    .product::<f64>();
                by_base[c1 as usize] += prob * ofdm_triple_yield(c1, c2, c3) as f64;
                weight[c1 as usize] += prob;
            }
            assert!((by_base[1] / weight[1] - ofdm_conditional_yield(true, f)).abs() < 1e-12);
            assert!((by_base[0] / weight[0] - ofdm_conditional_yield(false, f)).abs() < 1e-12);
            assert!((by_base[0] + by_base[1] - ofdm_yield_per_base(f)).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_examples() {
        let s = markov_closed_form_1ch(&table1(0.01)).unwrap();
        assert!((s.p_n - 0.9769).abs() < 0.0005);
        let s = markov_closed_form_1ch(&table1(0.99)).unwrap();
        assert!((s.gamma_n - 1.5792).abs() < 0.002);
        let mut p = table1(0.5);
        p.f_p = 0;
        assert_eq!(markov_closed_form_1ch(&p).unwrap().p[&(0, 1)], 0.0);
    }

    #[test]
    fn solve_examples() {
        let s = markov_solve(&table1(0.01), 2).unwrap();
        assert!((s.p_n - 0.969).abs() < 0.005);
        let p = MarkovParams::uniform(0.3, 0.0, 0.7, 3, 4.0, 10, 11);
        let s = markov_solve(&p, 3).unwrap();
        assert!((s.p_n - 0.6139).abs() < 0.005);
        let total: f64 = s.p.values().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(s.residual < 1e-9);
    }

    #[test]
    fn solve_rejects_bad_params() {
        let mut p = table1(0.5);
        p.mu.truncate(1);
        assert!(markov_solve(&p, 2).is_err());
        p.t = 0.0;
        assert!(markov_solve(&p, 1).is_err());
    }
}
