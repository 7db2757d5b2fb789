//! Ensembles average the class probabilities of their members.

use gfk_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::network::{ModelConfig, Network};
use crate::synth::SitsSample;

use super::eval::series_logits;

/// Log of the mean softmax over axis 1 of equally shaped `[L, K, H, W]` logits.
pub fn average_log_probs(members: &[Tensor]) -> Result<Tensor> {
    let first = members.first().ok_or_else(|| Error::Input("empty ensemble".into()))?;
    let shape = first.shape().to_vec();
    let [l, k, h, w] = match shape[..] {
        [l, k, h, w] => [l, k, h, w],
        _ => return Err(Error::Input(format!("expected logits [L,K,H,W], got {shape:?}"))),
    };
    if members.iter().any(|m| m.shape() != shape.as_slice()) {
        return Err(Error::Input("ensemble members produced differently shaped logits".into()));
    }
    let plane = h * w;
    let mut acc = vec![0.0; l * k * plane];
    for m in members {
        let d = m.data();
        for t in 0..l {
            for i in 0..plane {
                let at = |c: usize| (t * k + c) * plane + i;
                let mx = (0..k).map(|c| d[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (d[at(c)] - mx).exp()).sum();
                for c in 0..k {
                    acc[at(c)] += (d[at(c)] - mx).exp() / z;
                }
            }
        }
    }
    let n = members.len() as f64;
    Ok(Tensor::new(&shape, acc.into_iter().map(|p| (p / n).ln()).collect())?)
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig { seed: 0, ..a.clone() } == ModelConfig { seed: 0, ..b.clone() }
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<Network>,
}

impl Ensemble {
    /// Members may differ in their seed only.
    pub fn new(members: Vec<Network>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Config("an ensemble needs a member".into()))?;
        if members.iter().any(|m| !same_architecture(m.config(), first.config())) {
            return Err(Error::Config("ensemble members must share one model configuration".into()));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Network] {
        &self.members
    }

    pub fn config(&self) -> &ModelConfig {
        self.members[0].config()
    }

    pub fn series_logits(&self, s: &SitsSample) -> Result<Tensor> {
        let all: Vec<Tensor> = self.members.iter().map(|m| series_logits(m, s)).collect::<Result<_>>()?;
        average_log_probs(&all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opposing_members_average() {
        // two classes, one pixel: member a is sure of class 0, b of class 1
        let a = Tensor::new(&[1, 2, 1, 1], vec![0.0, 3.0f64.ln()]).unwrap();
        let b = Tensor::new(&[1, 2, 1, 1], vec![3.0f64.ln(), 0.0]).unwrap();
        let e = average_log_probs(&[a.clone(), b]).unwrap();
        for v in e.data() {
            assert!((v.exp() - 0.5).abs() < 1e-12);
        }
        let single = average_log_probs(&[a.clone()]).unwrap();
        assert!((single.data()[1].exp() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rejects_mixed_members() {
        let a = Network::new(&ModelConfig::tiny()).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.seed = 9;
        let b = Network::new(&cfg).unwrap();
        assert!(Ensemble::new(vec![a.clone(), b]).is_ok());
        cfg.base_channels *= 2;
        let c = Network::new(&cfg).unwrap();
        assert!(Ensemble::new(vec![a, c]).is_err());
        assert!(Ensemble::new(vec![]).is_err());
    }
}
