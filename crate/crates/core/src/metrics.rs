//! Regression metrics, interval coverage and quantile-bin calibration.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `E|Z|` for a standard normal `Z`.
pub const HALF_NORMAL_MEAN: f64 = 0.797_884_560_802_865_4;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub r2: f64,
    pub spearman_rho: f64,
    pub picp_95: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn compute(y: &[f64], mu: &[f64], sigma: &[f64]) -> Result<Self> {
        Ok(Self {
            mae: mae(y, mu)?,
            r2: r2(y, mu)?,
            spearman_rho: spearman_rho(y, mu)?,
            picp_95: picp(y, mu, sigma, Z95)?,
            n: y.len(),
        })
    }
}

fn check(y: &[f64], mu: &[f64], min: usize) -> Result<()> {
    if y.len() != mu.len() {
        return Err(Error::contract(format!(
            "length mismatch: {} targets, {} predictions",
            y.len(),
            mu.len()
        )));
    }
    if y.len() < min {
        return Err(Error::contract(format!("need at least {min} samples, got {}", y.len())));
    }
    Ok(())
}

pub fn mae(y: &[f64], mu: &[f64]) -> Result<f64> {
    check(y, mu, 1)?;
    Ok(y.iter().zip(mu).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn r2(y: &[f64], mu: &[f64]) -> Result<f64> {
    check(y, mu, 2)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("zero target variance".into()));
    }
    let ss_res: f64 = y.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("constant vector has no rank correlation".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of mid-ranks.
pub fn spearman_rho(y: &[f64], mu: &[f64]) -> Result<f64> {
    check(y, mu, 2)?;
    pearson(&mid_ranks(y), &mid_ranks(mu))
}

/// Fraction of samples with `|y - mu| <= z * sigma`.
pub fn picp(y: &[f64], mu: &[f64], sigma: &[f64], z: f64) -> Result<f64> {
    check(y, mu, 1)?;
    check(y, sigma, 1)?;
    if !(z > 0.0) {
        return Err(Error::contract("z must be positive"));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::contract("sigma must be positive"));
    }
    let inside = y
        .iter()
        .zip(mu)
        .zip(sigma)
        .filter(|((y, m), s)| (*y - *m).abs() <= z * **s)
        .count();
    Ok(inside as f64 / y.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin: usize,
    pub n: usize,
    pub mean_sigma: f64,
    pub mean_abs_err: f64,
    /// `None` for single-element bins.
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub theory: f64,
}

impl CalibrationBin {
    pub fn theory_inside_ci(&self) -> bool {
        match (self.ci_low, self.ci_high) {
            (Some(lo), Some(hi)) => lo <= self.theory && self.theory <= hi,
            _ => false,
        }
    }
}

/// Sort by sigma and cut into `num_bins` equal-count bins; the first
/// `n mod num_bins` bins take one extra sample.
pub fn calibration_table(y: &[f64], mu: &[f64], sigma: &[f64], num_bins: usize) -> Result<Vec<CalibrationBin>> {
    check(y, mu, 1)?;
    check(y, sigma, 1)?;
    let n = y.len();
    if num_bins < 2 || num_bins > n {
        return Err(Error::contract(format!(
            "need 2 <= bins <= samples, got {num_bins} bins for {n} samples"
        )));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::contract("sigma must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[a].total_cmp(&sigma[b]));
    let (base, extra) = (n / num_bins, n % num_bins);
    let mut start = 0;
    let mut out = Vec::with_capacity(num_bins);
    for b in 0..num_bins {
        let len = base + usize::from(b < extra);
        let members = &order[start..start + len];
        start += len;
        let m = len as f64;
        let mean_sigma = members.iter().map(|&i| sigma[i]).sum::<f64>() / m;
        let errs: Vec<f64> = members.iter().map(|&i| (y[i] - mu[i]).abs()).collect();
        let mean_abs_err = errs.iter().sum::<f64>() / m;
        let se = (len > 1).then(|| {
            let var = errs.iter().map(|e| (e - mean_abs_err).powi(2)).sum::<f64>() / (m - 1.0);
            var.sqrt() / m.sqrt()
        });
        out.push(CalibrationBin {
            bin: b,
            n: len,
            mean_sigma,
            mean_abs_err,
            se,
            ci_low: se.map(|s| mean_abs_err - 1.96 * s),
            ci_high: se.map(|s| mean_abs_err + 1.96 * s),
            theory: HALF_NORMAL_MEAN * mean_sigma,
        });
    }
    Ok(out)
}

/// Write the table as CSV, followed by a `picp_95` summary line.
pub fn write_calibration_csv<W: Write>(w: W, bins: &[CalibrationBin], picp_95: Option<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(w);
    w.write_record(["bin", "n", "mean_sigma", "mean_abs_err", "se", "ci_low", "ci_high", "theory"])?;
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    for b in bins {
        w.write_record([
            b.bin.to_string(),
            b.n.to_string(),
            b.mean_sigma.to_string(),
            b.mean_abs_err.to_string(),
            opt(b.se),
            opt(b.ci_low),
            opt(b.ci_high),
            b.theory.to_string(),
        ])?;
    }
    if let Some(p) = picp_95 {
        w.write_record(["picp_95".to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn simple_values() {
        assert_eq!(mae(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[1.5, 2.5], &[1.5, 2.5]).unwrap(), 0.0);
        assert!(mae(&[], &[]).is_err());
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
        assert_eq!(r2(&y, &[2.5; 4]).unwrap(), 0.0);
        assert!(r2(&y, &[4.0, 3.0, 2.0, 1.0]).unwrap() < 0.0);
        assert!(matches!(r2(&[1.0, 1.0], &[0.0, 2.0]), Err(Error::Degenerate(_))));
        assert_eq!(spearman_rho(&y, &[10.0, 20.0, 30.0, 40.0]).unwrap(), 1.0);
        assert_eq!(spearman_rho(&y, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(matches!(spearman_rho(&y, &[1.0; 4]), Err(Error::Degenerate(_))));
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_is_rank_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = normals(&mut rng, 300);
        let m = normals(&mut rng, 300);
        let base = spearman_rho(&y, &m).unwrap();
        let ey: Vec<f64> = y.iter().map(|v| v.exp()).collect();
        let cm: Vec<f64> = m.iter().map(|v| v.powi(3)).collect();
        assert_eq!(spearman_rho(&ey, &cm).unwrap(), base);
    }

    #[test]
    fn picp_values() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(picp(&y, &y, &[1e-12; 3], Z95).unwrap(), 1.0);
        assert_eq!(picp(&y, &[0.0; 3], &[1e-12; 3], Z95).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let z = normals(&mut rng, n);
        let y: Vec<f64> = (0..n).map(|i| mu[i] + sigma[i] * z[i]).collect();
        let p = picp(&y, &mu, &sigma, Z95).unwrap();
        assert!((p - 0.95).abs() < 0.01, "{p}");
        let mut prev = 0.0;
        for k in 1..40 {
            let q = picp(&y, &mu, &sigma, k as f64 * 0.1).unwrap();
            assert!(q >= prev);
            prev = q;
        }
    }

    #[test]
    fn calibration_bins_partition_the_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 103;
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
        let y = normals(&mut rng, n);
        let mu = vec![0.0; n];
        let bins = calibration_table(&y, &mu, &sigma, 10).unwrap();
        assert_eq!(bins.iter().map(|b| b.n).sum::<usize>(), n);
        assert_eq!(bins.iter().map(|b| b.n).collect::<Vec<_>>(), [11, 11, 11, 10, 10, 10, 10, 10, 10, 10]);
        assert!(bins.windows(2).all(|w| w[0].mean_sigma <= w[1].mean_sigma));
        assert!(calibration_table(&y[..5], &mu[..5], &sigma[..5], 10).is_err());

        let single = calibration_table(&y[..3], &mu[..3], &sigma[..3], 3).unwrap();
        assert!(single.iter().all(|b| b.se.is_none() && !b.theory_inside_ci()));
    }

    #[test]
    fn calibration_degenerate_and_scaling() {
        let y = vec![1.0; 40];
        let mu: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 0.0 } else { 2.0 }).collect();
        let sigma = vec![0.7; 40];
        let bins = calibration_table(&y, &mu, &sigma, 4).unwrap();
        for b in &bins {
            assert_eq!(b.mean_abs_err, 1.0);
            assert_eq!(b.se, Some(0.0));
        }
        let doubled: Vec<f64> = sigma.iter().map(|s| 2.0 * s).collect();
        let b2 = calibration_table(&y, &mu, &doubled, 4).unwrap();
        for (a, b) in bins.iter().zip(&b2) {
            assert!((b.theory - 2.0 * a.theory).abs() < 1e-15);
            assert_eq!(a.mean_abs_err, b.mean_abs_err);
        }
    }

    #[test]
    fn calibrated_simulator_hits_theory_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 50_000;
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
        let z = normals(&mut rng, n);
        let y: Vec<f64> = (0..n).map(|i| sigma[i] * z[i]).collect();
        let bins = calibration_table(&y, &vec![0.0; n], &sigma, 10).unwrap();
        let hits = bins.iter().filter(|b| b.theory_inside_ci()).count();
        assert!(hits >= 9, "{hits}");
    }

    #[test]
    fn csv_has_expected_columns() {
        let bins = calibration_table(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4], &[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        let mut buf = Vec::new();
        write_calibration_csv(&mut buf, &bins, Some(0.5)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "bin,n,mean_sigma,mean_abs_err,se,ci_low,ci_high,theory");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "picp_95,0.5");
    }
}
