use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance, measured against `max(|analytic|, |numeric|, 1e-8)`.
    pub tolerance: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, tolerance: 1e-4, max_entries_per_param: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    /// Index, analytic and numeric value of the worst entry.
    pub worst: Option<(usize, f64, f64)>,
    pub flagged: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| !p.flagged)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.flagged)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    Ok(tape.value(loss).item())
}

/// Compares tape gradients of the scalar function `f` with central differences.
pub fn grad_check<F>(store: &mut ParamStore, f: F, config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let first = evaluate(store, &f)?;
    let second = evaluate(store, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };

    let h = config.step;
    let mut params = Vec::new();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let picks: Vec<usize> = match config.max_entries_per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            entries_checked: picks.len(),
            max_rel_error: 0.0,
            worst: None,
            flagged: false,
        };
        for k in picks {
            let original = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = original + h;
            let plus = evaluate(store, &f);
            store.get_mut(id).value.data_mut()[k] = original - h;
            let minus = evaluate(store, &f);
            store.get_mut(id).value.data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(rel);
                check.worst = Some((k, a, numeric));
            }
        }
        check.flagged = check.max_rel_error > config.tolerance;
        params.push(check);
    }
    Ok(GradCheckReport { params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamGroup;
    use crate::tensor::Tensor;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", ParamGroup::TaskSpecific, Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn square_passes() {
        let mut store = one_param(3.0);
        let report = grad_check(
            &mut store,
            |t| {
                let p = t.param(ParamId(0));
                t.mul(p, p)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-8);
        assert_eq!(store.value(ParamId(0)).item(), 3.0);
    }

    #[test]
    fn wrong_gradient_rule_is_flagged() {
        let mut store = one_param(0.7);
        let report = grad_check(
            &mut store,
            |t| {
                let p = t.param(ParamId(0));
                // d/dx sin(x) deliberately misreported as sin(x)
                t.map(p, f64::sin, f64::sin)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.flagged().next().unwrap().name, "p");
    }

    #[test]
    fn nondeterminism_is_detected() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let counter = AtomicU64::new(0);
        let mut store = one_param(1.0);
        let err = grad_check(
            &mut store,
            |t| {
                let k = counter.fetch_add(1, Ordering::Relaxed) as f64;
                let p = t.param(ParamId(0));
                t.scale(p, 1.0 + k)
            },
            GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Determinism { .. }));
    }
}
