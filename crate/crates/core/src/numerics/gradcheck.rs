//! Central finite differences, used as an independent check on the tape.

use super::params::ParamStore;
use crate::error::Result;

/// Largest relative error between `analytic` and the central difference of
/// `loss` for every scalar of parameter `name`.
///
/// The relative error of a pair is `|a - n| / max(|a|, |n|, floor)`, which
/// keeps entries whose true gradient is near zero from dominating.
pub fn max_relative_error<F>(
    params: &ParamStore,
    name: &str,
    analytic: &[f64],
    step: f64,
    floor: f64,
    mut loss: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut work = params.clone();
    let n = params.get(name).map_or(0, |t| t.len());
    let mut worst = 0.0_f64;
    for i in 0..n {
        let original = work.get(name).expect("present").data()[i];
        work.get_mut(name).expect("present").data_mut()[i] = original + step;
        let up = loss(&work)?;
        work.get_mut(name).expect("present").data_mut()[i] = original - step;
        let down = loss(&work)?;
        work.get_mut(name).expect("present").data_mut()[i] = original;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
