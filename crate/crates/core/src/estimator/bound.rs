//! Second-moment diagnostic for a controlled estimator.

use crate::error::{Error, Result};
use crate::model::EventObservable;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentBound {
    /// `exp(2 log Phi(0, x0) - 2 min_y log Phi(T, y))`.
    pub bound: f64,
    pub log_phi0: f64,
    /// Minimum of `log Phi(T, y)` over the supplied event states.
    pub min_log_phi_t: f64,
}

/// Upper bound on the second moment of the importance-sampling estimator driven by `phi`.
///
/// The infimum over the event is replaced by a minimum over `event_samples`, so the value is
/// an approximation from below of the true bound. Every sample must lie in the event.
pub fn second_moment_bound<F>(phi: F, obs: &EventObservable, horizon: f64, x0: &[f64], event_samples: &[Vec<f64>]) -> Result<MomentBound>
where
    F: Fn(f64, &[f64]) -> Result<f64>,
{
    if event_samples.is_empty() {
        return Err(Error::Bound("no event states supplied".into()));
    }
    let phi0 = phi(0.0, x0)?;
    if phi0 <= 0.0 {
        return Err(Error::Bound(format!("Phi(0, x0) = {phi0:e} is not positive")));
    }
    let mut min_log = f64::INFINITY;
    for y in event_samples {
        if !obs.in_event(y) {
            return Err(Error::Bound(format!("state {y:?} lies outside the event")));
        }
        let v = phi(horizon, y)?;
        if v <= 0.0 || !v.is_finite() {
            return Err(Error::Bound(format!("Phi(T, y) = {v:e} at {y:?}; positivization is insufficient on the event")));
        }
        min_log = min_log.min(v.ln());
    }
    let log_phi0 = phi0.ln();
    Ok(MomentBound { bound: (2.0 * log_phi0 - 2.0 * min_log).exp(), log_phi0, min_log_phi_t: min_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Margin;

    fn obs() -> EventObservable {
        EventObservable::indicator(Margin::HalfSpace { coord: 0, threshold: 2.0 })
    }

    fn event_grid() -> Vec<Vec<f64>> {
        (0..1000).map(|i| vec![2.0 + 4.0 * (i as f64 + 0.5) / 1000.0]).collect()
    }

    #[test]
    fn constant_function_gives_one() {
        let b = second_moment_bound(|_, _| Ok(0.37), &obs(), 1.0, &[0.0], &event_grid()).unwrap();
        assert!((b.bound - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exact_terminal_match_gives_rho_squared() {
        let rho = 0.0157;
        let phi = |t: f64, x: &[f64]| Ok(if t == 0.0 { rho } else if x[0] > 2.0 { 1.0 } else { 0.0 });
        let b = second_moment_bound(phi, &obs(), 1.0, &[0.0], &event_grid()).unwrap();
        assert_eq!(b.min_log_phi_t, 0.0);
        assert!((b.bound - rho * rho).abs() < 1e-16);
    }

    #[test]
    fn rejects_nonpositive_and_outside_states() {
        let phi = |_: f64, x: &[f64]| Ok(x[0] - 3.0);
        assert!(matches!(second_moment_bound(phi, &obs(), 1.0, &[5.0], &event_grid()), Err(Error::Bound(_))));
        let outside = vec![vec![1.0]];
        assert!(matches!(second_moment_bound(|_, _| Ok(1.0), &obs(), 1.0, &[0.0], &outside), Err(Error::Bound(_))));
    }
}
