use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    CrossAttention,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Backbone, ParamGroup::CrossAttention, ParamGroup::Head];

    /// Group implied by a hierarchical parameter path.
    ///
    /// Anything under a `ca` segment (including the gates) is cross-attention;
    /// projectors and the `heads.` subtree are loss heads; the rest is backbone.
    pub fn from_name(name: &str) -> ParamGroup {
        let mut segments = name.split('.');
        if name.starts_with("heads.") || name.split('.').any(|s| s == "projector") {
            ParamGroup::Head
        } else if segments.any(|s| s == "ca" || s == "alpha") {
            ParamGroup::CrossAttention
        } else {
            ParamGroup::Backbone
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::CrossAttention => "cross_attention",
            ParamGroup::Head => "head",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Flat, insertion-ordered parameter table with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize], trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let t = Tensor::new(data, shape)?;
        let tensor = if trainable { t.requires_grad() } else { t };
        let id = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            group: ParamGroup::from_name(name),
            tensor,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn add(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, data, shape, true)
    }

    /// A stored value that never receives gradients.
    pub fn add_frozen(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, data, shape, false)
    }

    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::contract(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.add(name, data, shape)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, vec![value; shape.iter().product()], shape)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over every stored tensor.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Replaces a parameter's values, keeping its accumulated gradient.
    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let p = &mut self.params[id.0];
        let shape = p.tensor.shape().to_vec();
        let fresh = Tensor::new(data, &shape)?;
        let fresh = if p.trainable { fresh.requires_grad() } else { fresh };
        if let Some(g) = p.tensor.grad() {
            fresh.accumulate(&g);
        }
        p.tensor = fresh;
        Ok(())
    }

    pub fn zero_grads(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_names() {
        assert_eq!(ParamGroup::from_name("video.layer3.ca.q.weight"), ParamGroup::CrossAttention);
        assert_eq!(ParamGroup::from_name("text.layer1.ca.alpha"), ParamGroup::CrossAttention);
        assert_eq!(ParamGroup::from_name("heads.mlm.weight"), ParamGroup::Head);
        assert_eq!(ParamGroup::from_name("video.projector.0.weight"), ParamGroup::Head);
        assert_eq!(ParamGroup::from_name("text.layer0.attn.q.weight"), ParamGroup::Backbone);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add_const("a.b", &[2], 0.0).unwrap();
        assert!(s.add_const("a.b", &[2], 1.0).is_err());
    }

    #[test]
    fn set_data_keeps_grad_and_tracking() {
        let mut s = ParamStore::new();
        let id = s.add_const("w", &[2], 1.0).unwrap();
        s.get(id).sum_all().backward().unwrap();
        s.set_data(id, vec![3.0, 4.0]).unwrap();
        assert_eq!(s.get(id).data(), &[3.0, 4.0]);
        assert_eq!(s.get(id).grad().unwrap(), vec![1.0, 1.0]);
        assert!(s.get(id).is_tracked());
    }
}
