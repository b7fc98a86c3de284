use super::ParamBank;
use crate::error::Result;

pub const GRADCHECK_H: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-8;

/// Worst relative error for one named parameter.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < GRADCHECK_TOL
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `loss_fn` must be a pure function of the bank values (fix the rng and the
/// sample before calling). Analytic gradients are taken from the bank's grad
/// slots, which the caller populates with a single backward pass; this
/// routine only re-evaluates the forward loss.
pub fn check_gradients(
    bank: &mut ParamBank,
    mut loss_fn: impl FnMut(&ParamBank) -> Result<f64>,
    h: f64,
) -> Result<GradCheckReport> {
    let ids = bank.trainable_ids();
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let name = bank.name(id).to_string();
        let n = bank.get(id).numel();
        let analytic: Vec<f64> = match bank.get(id).grad.as_ref() {
            Some(g) => g.clone(),
            None => vec![0.0; n],
        };
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = bank.get(id).data[i];
            bank.get_mut(id).data[i] = orig + h;
            let plus = loss_fn(bank)?;
            bank.get_mut(id).data[i] = orig - h;
            let minus = loss_fn(bank)?;
            bank.get_mut(id).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        groups.push(GroupReport {
            name,
            max_rel_err: worst,
            checked: n,
        });
    }
    Ok(GradCheckReport { groups })
}
