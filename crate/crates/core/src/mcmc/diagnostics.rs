//! Convergence diagnostics: split R̂, autocorrelation and effective sample
//! size.

use crate::error::{Error, Result};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Split-chain potential scale reduction factor.
pub fn rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::DegenerateTrace("R-hat needs at least two chains".into()));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < 4 {
        return Err(Error::DegenerateTrace("R-hat needs at least four draws per chain".into()));
    }
    let half = n / 2;
    let mut pieces: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        // drop the middle draw of odd-length chains
        pieces.push(&c[..half]);
        pieces.push(&c[n - half..n]);
    }
    let w_each: Vec<f64> = pieces.iter().map(|p| variance(p)).collect();
    if w_each.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::DegenerateTrace("a chain has zero variance".into()));
    }
    let means: Vec<f64> = pieces.iter().map(|p| mean(p)).collect();
    let len = half as f64;
    let w = mean(&w_each);
    let b = len * variance(&means);
    let var_plus = (len - 1.0) / len * w + b / len;
    Ok((var_plus / w).sqrt())
}

/// Sample autocorrelation at lags `0..=max_lag`.
pub fn autocorr(trace: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if trace.len() <= max_lag {
        return Err(Error::DegenerateTrace(format!(
            "trace of length {} is too short for lag {max_lag}",
            trace.len()
        )));
    }
    let n = trace.len();
    let m = mean(trace);
    let centred: Vec<f64> = trace.iter().map(|v| v - m).collect();
    let c0 = centred.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(c0 > 0.0) {
        return Err(Error::DegenerateTrace("constant trace".into()));
    }
    let mut out = Vec::with_capacity(max_lag + 1);
    out.push(1.0);
    for k in 1..=max_lag {
        let ck = centred[..n - k]
            .iter()
            .zip(&centred[k..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64;
        out.push(ck / c0);
    }
    Ok(out)
}

/// Effective sample size over all chains, truncating the chain-averaged
/// autocorrelation with Geyer's initial positive sequence.
pub fn ess(chains: &[Vec<f64>]) -> Result<f64> {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if chains.is_empty() || n < 4 {
        return Err(Error::DegenerateTrace("too few draws for ESS".into()));
    }
    let max_lag = (n - 1).min(2000);
    let mut rho = vec![0.0; max_lag + 1];
    for c in chains {
        let a = autocorr(&c[..n], max_lag)?;
        for (r, v) in rho.iter_mut().zip(a) {
            *r += v / chains.len() as f64;
        }
    }
    // sum consecutive pairs while they stay positive
    let mut tau = -1.0;
    let mut k = 0;
    while k + 1 <= max_lag {
        let pair = rho[k] + rho[k + 1];
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 2;
    }
    let total = (n * chains.len()) as f64;
    // antithetic chains are capped at N·log10(N)
    Ok(total / tau.max(1.0 / total.log10()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn ar1(seed: u64, n: usize, phi: f64) -> Vec<f64> {
        let e = normals(seed, n);
        let mut x = vec![0.0; n];
        for i in 1..n {
            x[i] = phi * x[i - 1] + e[i];
        }
        x
    }

    #[test]
    fn rhat_of_iid_chains_is_near_one() {
        let chains: Vec<Vec<f64>> = (0..3).map(|s| normals(s, 10_000)).collect();
        let r = rhat(&chains).unwrap();
        assert!((0.999..=1.01).contains(&r), "{r}");
    }

    #[test]
    fn rhat_detects_offset_chains() {
        let a = normals(1, 2000);
        let b: Vec<f64> = normals(2, 2000).into_iter().map(|v| v + 10.0).collect();
        assert!(rhat(&[a, b]).unwrap() > 1.5);
    }

    #[test]
    fn rhat_rejects_constant_chains() {
        let c = vec![vec![1.0; 100], vec![1.0; 100]];
        assert!(matches!(rhat(&c), Err(Error::DegenerateTrace(_))));
        assert!(rhat(&[vec![1.0, 2.0, 3.0, 4.0]]).is_err());
    }

    #[test]
    fn white_noise_autocorrelation() {
        let n = 20_000;
        let a = autocorr(&normals(4, n), 100).unwrap();
        assert_eq!(a[0], 1.0);
        let bound = 3.0 / (n as f64).sqrt();
        let inside = a[1..].iter().filter(|v| v.abs() < bound).count();
        assert!(inside >= 98, "{inside}");
    }

    #[test]
    fn ar1_autocorrelation() {
        let a = autocorr(&ar1(5, 100_000, 0.9), 3).unwrap();
        assert!((a[1] - 0.9).abs() < 0.05);
        assert!(matches!(autocorr(&[2.0; 50], 3), Err(Error::DegenerateTrace(_))));
        assert!(autocorr(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn ess_of_ar1_matches_theory() {
        // τ = (1 + φ)/(1 - φ) = 19 for φ = 0.9
        let chains: Vec<Vec<f64>> = (0..4).map(|s| ar1(10 + s, 50_000, 0.9)).collect();
        let e = ess(&chains).unwrap();
        let expected = 200_000.0 / 19.0;
        assert!((e / expected - 1.0).abs() < 0.15, "{e} vs {expected}");
        let iid: Vec<Vec<f64>> = (0..2).map(|s| normals(20 + s, 5_000)).collect();
        let e = ess(&iid).unwrap();
        assert!((e / 10_000.0 - 1.0).abs() < 0.15, "{e}");
    }
}
