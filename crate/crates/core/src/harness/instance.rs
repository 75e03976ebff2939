use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::features::FeatureMap;
use crate::io::{read_json, vec_to_vector, vector_to_vec, write_json, MatrixData};
use crate::mdp::{make_chain, make_deep_sea, make_linear_mdp, LinearMdp, TabularMdp};

/// Generator parameters recorded alongside an instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceSpec {
    Chain {
        length: usize,
        slip: f64,
        goal_reward: f64,
        gamma: f64,
    },
    DeepSea {
        depth: usize,
        gamma: f64,
    },
    Linear {
        n_states: usize,
        n_actions: usize,
        dim: usize,
        gamma: f64,
        seed: u64,
        #[serde(default = "unit_scale")]
        reward_scale: f64,
    },
}

fn unit_scale() -> f64 {
    1.0
}

/// The Linear-MDP factorization `P = ΦM`, `r = Φw`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearFactors {
    pub mixture: MatrixData,
    pub reward_weights: Vec<f64>,
}

/// On-disk instance. `transitions` is `(n_states·n_actions) x n_states`,
/// `features` is `(n_states·n_actions) x d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub transitions: MatrixData,
    pub rewards: Vec<f64>,
    pub initial_dist: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<MatrixData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<LinearFactors>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<InstanceSpec>,
}

/// A validated instance.
#[derive(Clone, Debug)]
pub struct Instance {
    pub mdp: TabularMdp<f64>,
    pub features: Option<FeatureMap<f64>>,
    /// Present when the file carries a Linear-MDP factorization.
    pub linear: Option<LinearMdp<f64>>,
    pub source: Option<InstanceSpec>,
}

impl Instance {
    pub fn generate(spec: &InstanceSpec) -> Result<Self> {
        let (mdp, features, linear) = match *spec {
            InstanceSpec::Chain {
                length,
                slip,
                goal_reward,
                gamma,
            } => (make_chain(length, slip, goal_reward, gamma)?, None, None),
            InstanceSpec::DeepSea { depth, gamma } => (make_deep_sea(depth, gamma)?, None, None),
            InstanceSpec::Linear {
                n_states,
                n_actions,
                dim,
                gamma,
                seed,
                reward_scale,
            } => {
                let mut lin = make_linear_mdp(n_states, n_actions, dim, gamma, seed)?;
                if reward_scale != 1.0 {
                    lin = lin.with_reward_scale(reward_scale)?;
                }
                (lin.mdp.clone(), Some(lin.features.clone()), Some(lin))
            }
        };
        Ok(Self {
            mdp,
            features,
            linear,
            source: Some(spec.clone()),
        })
    }

    /// Features stored with the instance, or the one-hot map.
    pub fn features_or_one_hot(&self) -> FeatureMap<f64> {
        self.features
            .clone()
            .unwrap_or_else(|| FeatureMap::one_hot(self.mdp.n_states(), self.mdp.n_actions()))
    }

    pub fn to_file(&self) -> InstanceFile {
        InstanceFile {
            n_states: self.mdp.n_states(),
            n_actions: self.mdp.n_actions(),
            gamma: self.mdp.discount(),
            r_max: self.mdp.r_max(),
            transitions: MatrixData::from_matrix(self.mdp.transitions()),
            rewards: vector_to_vec(self.mdp.rewards()),
            initial_dist: vector_to_vec(self.mdp.initial_dist()),
            features: self.features.as_ref().map(|f| MatrixData::from_matrix(f.matrix())),
            linear: self.linear.as_ref().map(|l| LinearFactors {
                mixture: MatrixData::from_matrix(&l.mixture),
                reward_weights: vector_to_vec(&l.reward_weights),
            }),
            source: self.source.clone(),
        }
    }

    /// Validates shapes, stochasticity and, for Linear MDPs, that the stored
    /// factorization reproduces the dynamics and rewards.
    pub fn from_file(file: &InstanceFile) -> Result<Self> {
        let mdp = TabularMdp::new(
            file.n_states,
            file.n_actions,
            file.transitions.to_matrix()?,
            vec_to_vector(&file.rewards),
            file.gamma,
            file.r_max,
            vec_to_vector(&file.initial_dist),
        )?;
        let features = match &file.features {
            Some(m) => Some(FeatureMap::new(file.n_states, file.n_actions, m.to_matrix()?)?),
            None => None,
        };
        let linear = match &file.linear {
            None => None,
            Some(factors) => {
                let features = features
                    .clone()
                    .ok_or_else(|| Error::Format("linear factors need a feature matrix".into()))?;
                let mixture = factors.mixture.to_matrix::<f64>()?;
                let weights = vec_to_vector::<f64>(&factors.reward_weights);
                if mixture.nrows() != features.dim() || mixture.ncols() != file.n_states {
                    return Err(shape_err(
                        format!("mixture {}x{}", features.dim(), file.n_states),
                        format!("{}x{}", mixture.nrows(), mixture.ncols()),
                    ));
                }
                if weights.len() != features.dim() {
                    return Err(shape_err(format!("reward_weights[{}]", features.dim()), format!("[{}]", weights.len())));
                }
                let p_gap = (features.matrix() * &mixture - mdp.transitions()).amax();
                let r_gap = (features.matrix() * &weights - mdp.rewards()).amax();
                if p_gap > 1e-9 || r_gap > 1e-9 {
                    return Err(Error::Format(format!(
                        "linear factors do not reproduce the MDP (transition gap {p_gap:e}, reward gap {r_gap:e})"
                    )));
                }
                Some(LinearMdp {
                    mdp: mdp.clone(),
                    features,
                    mixture,
                    reward_weights: weights,
                })
            }
        };
        Ok(Self {
            mdp,
            features,
            linear,
            source: file.source.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&read_json(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_file())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_field() {
        let specs = [
            InstanceSpec::Chain {
                length: 3,
                slip: 0.1,
                goal_reward: 1.0,
                gamma: 0.9,
            },
            InstanceSpec::DeepSea { depth: 4, gamma: 0.99 },
            InstanceSpec::Linear {
                n_states: 6,
                n_actions: 2,
                dim: 3,
                gamma: 0.9,
                seed: 5,
                reward_scale: 1.0,
            },
        ];
        for spec in &specs {
            let inst = Instance::generate(spec).unwrap();
            let file = inst.to_file();
            let text = serde_json::to_string(&file).unwrap();
            let back: InstanceFile = serde_json::from_str(&text).unwrap();
            assert_eq!(back, file);
            let again = Instance::from_file(&back).unwrap();
            assert_eq!(again.mdp, inst.mdp);
            assert_eq!(again.linear.is_some(), matches!(spec, InstanceSpec::Linear { .. }));
        }
    }

    #[test]
    fn rejects_bad_shapes_and_rows() {
        let inst = Instance::generate(&InstanceSpec::DeepSea { depth: 3, gamma: 0.9 }).unwrap();
        let mut file = inst.to_file();
        file.rewards.pop();
        assert!(Instance::from_file(&file).is_err());

        let mut file = inst.to_file();
        file.transitions.data[0] += 0.5;
        assert!(matches!(Instance::from_file(&file), Err(Error::NotStochastic { .. })));

        let mut file = inst.to_file();
        file.transitions.rows += 1;
        assert!(Instance::from_file(&file).is_err());
    }

    #[test]
    fn rejects_inconsistent_linear_factors() {
        let spec = InstanceSpec::Linear {
            n_states: 5,
            n_actions: 2,
            dim: 2,
            gamma: 0.9,
            seed: 1,
            reward_scale: 1.0,
        };
        let mut file = Instance::generate(&spec).unwrap().to_file();
        file.linear.as_mut().unwrap().reward_weights[0] += 0.1;
        assert!(matches!(Instance::from_file(&file), Err(Error::Format(_))));
    }
}
