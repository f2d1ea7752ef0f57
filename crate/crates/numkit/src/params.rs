use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::array::RealArray;
use crate::error::{shape_err, NumError, Result};

/// Named parameter arrays. Iteration is in name order, so two sets built from
/// the same entries iterate identically regardless of insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, RealArray>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: RealArray) -> Option<RealArray> {
        self.entries.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&RealArray> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RealArray> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&RealArray> {
        self.get(name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &RealArray)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(RealArray::len).sum()
    }

    /// Entries whose name starts with `prefix`, as a new set.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, arr) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((arr.shape().len() as u64).to_le_bytes());
            for d in arr.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in arr.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), RealArray::zeros(v.shape())))
                .collect(),
        }
    }
}

impl FromIterator<(String, RealArray)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, RealArray)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Loss value plus one gradient array per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientRecord {
    pub loss: f64,
    grads: BTreeMap<String, RealArray>,
}

impl GradientRecord {
    /// All-zero gradients shaped like `params`.
    pub fn zeros_for(params: &ParamSet) -> Self {
        GradientRecord {
            loss: 0.0,
            grads: params
                .iter()
                .map(|(k, v)| (k.clone(), RealArray::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn from_map(loss: f64, grads: BTreeMap<String, RealArray>) -> Self {
        GradientRecord { loss, grads }
    }

    pub fn get(&self, name: &str) -> Option<&RealArray> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &RealArray)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale * other`, including the loss. Names missing from `self`
    /// are added.
    pub fn add_scaled(&mut self, other: &GradientRecord, scale: f64) -> Result<()> {
        self.loss += scale * other.loss;
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(shape_err(
                            "gradient accumulate",
                            format!("{name}: {:?} vs {:?}", acc.shape(), g.shape()),
                        ));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    let mut scaled = g.clone();
                    scaled.data_mut().iter_mut().for_each(|v| *v *= scale);
                    self.grads.insert(name.clone(), scaled);
                }
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(RealArray::sq_norm)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// Concatenation of all gradient values in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads
            .values()
            .flat_map(|g| g.data().iter().copied())
            .collect()
    }

    /// Checks that every gradient has the shape of the matching parameter.
    pub fn check_against(&self, params: &ParamSet) -> Result<()> {
        for (name, g) in &self.grads {
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(shape_err(
                    "gradient",
                    format!("{name}: param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        Ok(())
    }
}
