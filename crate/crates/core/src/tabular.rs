//! Deterministic finite MDPs and value iteration.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};

/// Distances below this are not used as denominators of contraction ratios.
pub const RATIO_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularMdp {
    pub gamma: f64,
    /// `next[s][a]`: successor of taking `a` in `s`.
    pub next: Vec<Vec<usize>>,
    pub reward: Vec<Vec<f64>>,
}

impl TabularMdp {
    pub fn new(gamma: f64, next: Vec<Vec<usize>>, reward: Vec<Vec<f64>>) -> Result<Self> {
        let mdp = Self { gamma, next, reward };
        mdp.check()?;
        Ok(mdp)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(AtlasError::InvalidDiscount(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        let s = self.next.len();
        if s == 0 || self.reward.len() != s {
            return Err(AtlasError::DimensionMismatch("next and reward need one row per state".into()));
        }
        let a = self.next[0].len();
        if a == 0 {
            return Err(AtlasError::DimensionMismatch("at least one action is required".into()));
        }
        for (row, rew) in self.next.iter().zip(&self.reward) {
            if row.len() != a || rew.len() != a {
                return Err(AtlasError::DimensionMismatch("every state needs the same number of actions".into()));
            }
            if let Some(&bad) = row.iter().find(|&&t| t >= s) {
                return Err(AtlasError::DimensionMismatch(format!("successor {bad} out of range for {s} states")));
            }
            if !rew.iter().all(|r| r.is_finite()) {
                return Err(AtlasError::InvalidConfig("rewards must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.next.len()
    }

    pub fn num_actions(&self) -> usize {
        self.next[0].len()
    }

    /// Rewards `r = -l` from running costs.
    pub fn from_costs(gamma: f64, next: Vec<Vec<usize>>, cost: Vec<Vec<f64>>) -> Result<Self> {
        let reward = cost.into_iter().map(|row| row.into_iter().map(|c| -c).collect()).collect();
        Self::new(gamma, next, reward)
    }

    pub fn random<R: Rng>(states: usize, actions: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        let next = (0..states).map(|_| (0..actions).map(|_| rng.random_range(0..states)).collect()).collect();
        let reward = (0..states).map(|_| (0..actions).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        Self::new(gamma, next, reward)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: Self = serde_json::from_str(text)?;
        mdp.check()?;
        Ok(mdp)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// `(T W)(s) = max_a r(s, a) + gamma W(next(s, a))`.
pub fn bellman_backup(mdp: &TabularMdp, w: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(mdp.num_states(), |s, _| {
        mdp.next[s]
            .iter()
            .zip(&mdp.reward[s])
            .map(|(&t, &r)| r + mdp.gamma * w[t])
            .fold(f64::NEG_INFINITY, f64::max)
    })
}

/// `T W - T V`, evaluated as `max_a (q_a - max q) + gamma (W - V)(next(s, a))`
/// with `q_a = r(s, a) + gamma V(next(s, a))`, which avoids cancelling two
/// nearly equal backups.
pub fn backup_difference(mdp: &TabularMdp, w: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let d = w - v;
    DVector::from_fn(mdp.num_states(), |s, _| {
        let q: Vec<f64> = mdp.next[s].iter().zip(&mdp.reward[s]).map(|(&t, &r)| r + mdp.gamma * v[t]).collect();
        let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mdp.next[s]
            .iter()
            .zip(&q)
            .map(|(&t, &qa)| (qa - best) + mdp.gamma * d[t])
            .fold(f64::NEG_INFINITY, f64::max)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueIteration {
    pub value: DVector<f64>,
    pub iterations: usize,
    /// `|T W_k - V|_inf / |W_k - V|_inf` per sweep against the returned `V`,
    /// skipped once `W_k` coincides with `V`.
    pub ratios: Vec<f64>,
}

/// Iterates `W <- T W` from `w0` until successive iterates differ by at
/// most `tol` in the sup norm.
pub fn value_iteration(mdp: &TabularMdp, w0: &DVector<f64>, tol: f64) -> Result<ValueIteration> {
    if !(tol > 0.0) {
        return Err(AtlasError::InvalidConfig(format!("tol must be positive, got {tol}")));
    }
    if w0.len() != mdp.num_states() {
        return Err(AtlasError::DimensionMismatch(format!("W0 has {} entries for {} states", w0.len(), mdp.num_states())));
    }
    let mut iterates = vec![w0.clone()];
    loop {
        let w = iterates.last().unwrap();
        let next = bellman_backup(mdp, w);
        let step = (&next - w).amax();
        iterates.push(next);
        if step <= tol {
            break;
        }
    }
    let value = iterates.pop().unwrap();
    let mut ratios = Vec::with_capacity(iterates.len());
    for w in &iterates {
        let gap = (w - &value).amax();
        if gap > RATIO_FLOOR {
            ratios.push(backup_difference(mdp, w, &value).amax() / gap);
        }
    }
    Ok(ValueIteration { value, iterations: iterates.len(), ratios })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(r: f64) -> TabularMdp {
        TabularMdp::new(0.5, vec![vec![0]], vec![vec![r]]).unwrap()
    }

    #[test]
    fn single_state_backup() {
        let mdp = single(1.0);
        assert_eq!(bellman_backup(&mdp, &DVector::zeros(1))[0], 1.0);
        assert_eq!(bellman_backup(&mdp, &DVector::from_element(1, 2.0))[0], 2.0);
    }

    #[test]
    fn zero_reward_has_zero_fixed_point() {
        let mdp = TabularMdp::new(0.9, vec![vec![1, 0], vec![0, 1]], vec![vec![0.0; 2]; 2]).unwrap();
        assert_eq!(bellman_backup(&mdp, &DVector::zeros(2)), DVector::zeros(2));
    }

    #[test]
    fn starting_at_the_fixed_point_takes_one_sweep() {
        let mdp = single(1.0);
        let vi = value_iteration(&mdp, &DVector::from_element(1, 2.0), 1e-12).unwrap();
        assert_eq!(vi.iterations, 1);
        assert_eq!(vi.value[0], 2.0);
    }

    #[test]
    fn difference_matches_direct_form() {
        let mdp = TabularMdp::new(0.8, vec![vec![1, 0], vec![1, 1]], vec![vec![1.0, 0.5], vec![-1.0, 2.0]]).unwrap();
        let w = DVector::from_vec(vec![3.0, -1.0]);
        let v = DVector::from_vec(vec![0.25, 4.0]);
        let direct = bellman_backup(&mdp, &w) - bellman_backup(&mdp, &v);
        assert!((backup_difference(&mdp, &w, &v) - direct).amax() < 1e-14);
    }

    #[test]
    fn invalid_tables() {
        assert!(TabularMdp::new(1.0, vec![vec![0]], vec![vec![0.0]]).is_err());
        assert!(TabularMdp::new(0.5, vec![vec![1]], vec![vec![0.0]]).is_err());
        assert!(TabularMdp::new(0.5, vec![vec![0], vec![0, 1]], vec![vec![0.0], vec![0.0, 0.0]]).is_err());
        assert!(TabularMdp::from_json(r#"{"gamma":0.9,"next":[[0]],"reward":[[1.0]]}"#).is_ok());
    }

    #[test]
    fn costs_become_negative_rewards() {
        let mdp = TabularMdp::from_costs(0.5, vec![vec![0]], vec![vec![2.0]]).unwrap();
        assert_eq!(mdp.reward[0][0], -2.0);
    }
}
