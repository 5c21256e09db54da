use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest number of label paths [`brute_force_oracle`] will enumerate.
pub const ORACLE_PATH_LIMIT: usize = 1_000_000;

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub log_z: f64,
    pub best_path: Vec<usize>,
    pub best_score: f64,
    pub paths: usize,
}

/// Enumerates every label sequence to get the exact log partition function
/// and the maximum path. Test oracle for the dynamic programs.
pub fn brute_force_oracle(emissions: &Tensor, transitions: &Tensor) -> Result<OracleResult> {
    let len = emissions.rows();
    let labels = emissions.cols();
    if len == 0 || labels == 0 {
        return Err(Error::contract("oracle needs a non-empty instance"));
    }
    if transitions.shape() != [labels + 2, labels + 2] {
        return Err(Error::dim("brute_force_oracle", format!("transitions {:?}", transitions.shape())));
    }
    let paths = (labels as f64).powi(len as i32);
    if paths > ORACLE_PATH_LIMIT as f64 {
        return Err(Error::TooLarge { paths, limit: ORACLE_PATH_LIMIT });
    }
    let (start, stop) = (labels, labels + 1);
    let mut path = vec![0usize; len];
    let mut scores = Vec::with_capacity(paths as usize);
    let mut best_score = f64::NEG_INFINITY;
    let mut best_path = path.clone();
    loop {
        // same association order as the Viterbi recursion, so maxima agree bitwise
        let mut s = transitions.get(start, path[0]) + emissions.get(0, path[0]);
        for t in 1..len {
            s += transitions.get(path[t - 1], path[t]);
            s += emissions.get(t, path[t]);
        }
        s += transitions.get(path[len - 1], stop);
        if s > best_score {
            best_score = s;
            best_path.copy_from_slice(&path);
        }
        scores.push(s);

        // odometer increment, last position fastest
        let mut t = len;
        loop {
            if t == 0 {
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let log_z = max + scores.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                return Ok(OracleResult { log_z, best_path, best_score, paths: scores.len() });
            }
            t -= 1;
            path[t] += 1;
            if path[t] < labels {
                break;
            }
            path[t] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerates_all_paths() {
        let r = brute_force_oracle(&Tensor::zeros(1, 3), &Tensor::zeros(5, 5)).unwrap();
        assert_eq!(r.paths, 3);
        let e = Tensor::from_rows(3, 2, vec![0.1, -0.3, 0.7, 0.2, -0.5, 0.4]).unwrap();
        let r = brute_force_oracle(&e, &Tensor::zeros(4, 4)).unwrap();
        assert_eq!(r.paths, 8);
        assert!(r.log_z >= r.best_score);
    }

    #[test]
    fn guard_rejects_large_instances() {
        let e = Tensor::zeros(11, 4);
        assert!(matches!(
            brute_force_oracle(&e, &Tensor::zeros(6, 6)),
            Err(Error::TooLarge { .. })
        ));
    }
}
