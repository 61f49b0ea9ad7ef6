//! Low-rank adapters `delta = s * B * A` attached to named linear layers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::nn::{self, AdapterVar, AdapterVars, BindAdapters, Model, NnError};
use crate::seed;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("binding error: adapter targets unknown layer {0:?}")]
    UnknownTarget(String),
    #[error("rank {rank} too large for {target:?} (at most {max})")]
    RankTooLarge { target: String, rank: usize, max: usize },
    #[error("rank must be positive")]
    ZeroRank,
    #[error("scale must be finite and non-negative, got {0}")]
    BadScale(f64),
    #[error("binding error: {0}")]
    Binding(String),
    #[error("malformed adapter file: {0}")]
    Format(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LoraError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    /// `r x d_in`
    pub a: Tensor,
    /// `d_out x r`
    pub b: Tensor,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(target: impl Into<String>, a: Tensor, b: Tensor, scale: f64) -> Result<Self> {
        let target = target.into();
        let (r, _) = a.dims2()?;
        let (_, r2) = b.dims2()?;
        if r != r2 {
            return Err(LoraError::Binding(format!(
                "{target}: A is {:?} but B is {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(LoraError::BadScale(scale));
        }
        Ok(Self { target, a, b, scale })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    /// `s * (B A)`, shape `d_out x d_in`.
    pub fn delta(&self) -> Tensor {
        self.b.matmul(&self.a).expect("factor shapes checked at construction").scaled(self.scale)
    }

    pub fn trainable_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterRole {
    /// The global adapter kept after training.
    Shared,
    /// A per-task working copy.
    Local,
}

/// Adapters keyed by target layer name, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub role: AdapterRole,
    adapters: BTreeMap<String, LoraAdapter>,
}

impl AdapterSet {
    pub fn new(role: AdapterRole, adapters: impl IntoIterator<Item = LoraAdapter>) -> Self {
        Self {
            role,
            adapters: adapters.into_iter().map(|a| (a.target.clone(), a)).collect(),
        }
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.get(target)
    }

    pub fn get_mut(&mut self, target: &str) -> Option<&mut LoraAdapter> {
        self.adapters.get_mut(target)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn targets(&self) -> Vec<&str> {
        self.adapters.keys().map(String::as_str).collect()
    }

    /// Deep copy tagged as a task-local working set.
    pub fn clone_local(&self) -> AdapterSet {
        AdapterSet {
            role: AdapterRole::Local,
            adapters: self.adapters.clone(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.iter().map(LoraAdapter::trainable_count).sum()
    }

    /// Parameter order used everywhere: for each target in name order, A then B.
    pub fn param_names(&self) -> Vec<String> {
        self.iter()
            .flat_map(|a| [format!("{}.lora_A", a.target), format!("{}.lora_B", a.target)])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.iter().flat_map(|a| [&a.a, &a.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.adapters
            .values_mut()
            .flat_map(|a| [&mut a.a, &mut a.b])
            .collect()
    }

    /// Exact comparison of every stored byte, signed zeros included.
    pub fn bit_identical(&self, other: &AdapterSet) -> bool {
        self.adapters.len() == other.adapters.len()
            && self.iter().zip(other.iter()).all(|(x, y)| {
                x.target == y.target
                    && x.scale.to_bits() == y.scale.to_bits()
                    && x.a.shape() == y.a.shape()
                    && x.b.shape() == y.b.shape()
                    && x.a.to_bits() == y.a.to_bits()
                    && x.b.to_bits() == y.b.to_bits()
            })
    }

    /// Checks that every target names a linear layer with matching dimensions.
    pub fn check_binding(&self, model: &Model) -> Result<()> {
        for ad in self.iter() {
            let layer = model
                .find_linear(&ad.target)
                .ok_or_else(|| LoraError::UnknownTarget(ad.target.clone()))?;
            if layer.d_in() != ad.d_in() || layer.d_out() != ad.d_out() {
                return Err(LoraError::Binding(format!(
                    "{}: adapter is {}x{}, layer is {}x{}",
                    ad.target,
                    ad.d_out(),
                    ad.d_in(),
                    layer.d_out(),
                    layer.d_in()
                )));
            }
        }
        Ok(())
    }

    /// Gradients of the factors recorded by [`BindAdapters::bind`] with `trainable = true`.
    pub fn grads_from(&self, tape: &Tape, vars: &AdapterVars) -> Result<AdapterGrads> {
        let mut tensors = Vec::with_capacity(2 * self.len());
        for ad in self.iter() {
            let v = vars
                .entries
                .get(&ad.target)
                .ok_or_else(|| LoraError::Binding(format!("{} was not bound", ad.target)))?;
            for (var, src) in [(v.a, &ad.a), (v.b, &ad.b)] {
                let g = tape.grad_tensor(var).unwrap_or_else(|| Tensor::zeros(src.shape()));
                tensors.push(g);
            }
        }
        Ok(AdapterGrads {
            names: self.param_names(),
            tensors,
        })
    }

    /// Header record `lora.header = [r, s]`, then `<target>.lora_A` / `<target>.lora_B`.
    pub fn to_records(&self) -> Result<Vec<(String, Tensor)>> {
        let first = self
            .iter()
            .next()
            .ok_or_else(|| LoraError::Format("cannot store an empty adapter set".into()))?;
        let (r, s) = (first.rank(), first.scale);
        if self.iter().any(|a| a.rank() != r || a.scale.to_bits() != s.to_bits()) {
            return Err(LoraError::Format("adapters in one file must share rank and scale".into()));
        }
        let mut out = vec![("lora.header".to_string(), Tensor::vector(&[r as f64, s]))];
        for a in self.iter() {
            out.push((format!("{}.lora_A", a.target), a.a.detached()));
            out.push((format!("{}.lora_B", a.target), a.b.detached()));
        }
        Ok(out)
    }

    pub fn from_records(records: &[(String, Tensor)]) -> Result<AdapterSet> {
        let mut iter = records.iter();
        let (name, header) = iter
            .next()
            .ok_or_else(|| LoraError::Format("empty adapter file".into()))?;
        if name != "lora.header" || header.numel() != 2 {
            return Err(LoraError::Format("first record must be lora.header = [r, s]".into()));
        }
        let (r, s) = (header.data()[0], header.data()[1]);
        let mut a_parts = BTreeMap::new();
        let mut b_parts = BTreeMap::new();
        for (name, t) in iter {
            if let Some(target) = name.strip_suffix(".lora_A") {
                a_parts.insert(target.to_string(), t.detached());
            } else if let Some(target) = name.strip_suffix(".lora_B") {
                b_parts.insert(target.to_string(), t.detached());
            } else {
                return Err(LoraError::Format(format!("unexpected record {name:?}")));
            }
        }
        if a_parts.len() != b_parts.len() {
            return Err(LoraError::Format("unpaired lora_A / lora_B records".into()));
        }
        let mut adapters = Vec::new();
        for (target, a) in a_parts {
            let b = b_parts
                .remove(&target)
                .ok_or_else(|| LoraError::Format(format!("{target}: missing lora_B")))?;
            let ad = LoraAdapter::new(target, a, b, s)?;
            if ad.rank() as f64 != r {
                return Err(LoraError::Format(format!("{}: rank differs from header", ad.target)));
            }
            adapters.push(ad);
        }
        Ok(AdapterSet::new(AdapterRole::Shared, adapters))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let records = self.to_records()?;
        let refs: Vec<(&str, &Tensor)> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        Ok(nn::io::encode_records(&refs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(NnError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<AdapterSet> {
        AdapterSet::from_records(&nn::io::load_records(path)?)
    }
}

impl BindAdapters for AdapterSet {
    fn bind(&self, tape: &mut Tape, trainable: bool) -> AdapterVars {
        let entries = self
            .iter()
            .map(|ad| {
                let (a, b) = if trainable {
                    (tape.param(ad.a.detached()), tape.param(ad.b.detached()))
                } else {
                    (tape.constant(ad.a.detached()), tape.constant(ad.b.detached()))
                };
                let var = AdapterVar {
                    a,
                    b,
                    scale: ad.scale,
                };
                (ad.target.clone(), var)
            })
            .collect();
        AdapterVars { entries }
    }
}

/// Gradients aligned with [`AdapterSet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl AdapterGrads {
    pub fn zeros_like(set: &AdapterSet) -> Self {
        Self {
            names: set.param_names(),
            tensors: set.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn refs(&self) -> Vec<&Tensor> {
        self.tensors.iter().collect()
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Elementwise mean, summed in list order so the result never depends
    /// on which worker produced which entry.
    pub fn mean(list: &[AdapterGrads]) -> Result<AdapterGrads> {
        let first = list
            .first()
            .ok_or_else(|| LoraError::Binding("no gradients to average".into()))?;
        let mut acc = first.clone();
        for g in &list[1..] {
            if g.names != acc.names {
                return Err(LoraError::Binding("gradient sets target different parameters".into()));
            }
            for (a, t) in acc.tensors.iter_mut().zip(&g.tensors) {
                *a = a.add(t)?;
            }
        }
        let n = list.len() as f64;
        for a in &mut acc.tensors {
            a.data_mut().iter_mut().for_each(|x| *x /= n);
        }
        Ok(acc)
    }
}

/// Fresh adapters on `targets`: `A ~ U[-1/sqrt(d_in), 1/sqrt(d_in)]`, `B = 0`.
///
/// Each target draws from its own stream derived from `(seed, target name)`.
pub fn init_adapters(model: &Model, targets: &[String], rank: usize, scale: f64, seed: u64) -> Result<AdapterSet> {
    if rank == 0 {
        return Err(LoraError::ZeroRank);
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(LoraError::BadScale(scale));
    }
    let mut adapters = Vec::with_capacity(targets.len());
    for target in targets {
        let layer = model
            .find_linear(target)
            .ok_or_else(|| LoraError::UnknownTarget(target.clone()))?;
        let (d_in, d_out) = (layer.d_in(), layer.d_out());
        let max = d_in.min(d_out);
        if rank > max {
            return Err(LoraError::RankTooLarge {
                target: target.clone(),
                rank,
                max,
            });
        }
        let mut rng = seed::stream(&[seed::TAG_ADAPTER, seed, seed::name_id(target)]);
        let bound = 1.0 / (d_in as f64).sqrt();
        let a_data = (0..rank * d_in).map(|_| rng.gen_range(-bound..=bound)).collect();
        let a = Tensor::new(vec![rank, d_in], a_data)?;
        let b = Tensor::zeros(&[d_out, rank]);
        adapters.push(LoraAdapter::new(target.clone(), a, b, scale)?);
    }
    Ok(AdapterSet::new(AdapterRole::Shared, adapters))
}

/// Folds every adapter into its layer: `W0 <- W0 + s B A`.
pub fn merge_adapter(model: &Model, shared: &AdapterSet) -> Result<Model> {
    shared.check_binding(model)?;
    let mut merged = model.clone();
    for layer in merged.linear_layers_mut() {
        if let Some(ad) = shared.get(&layer.name) {
            layer.weight = layer.weight.add(&ad.delta())?;
        }
    }
    Ok(merged)
}
