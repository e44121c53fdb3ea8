use std::collections::HashMap;

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    /// Buffers (running statistics, power-iteration vectors) are not trainable.
    pub trainable: bool,
}

/// Named parameters and buffers of one network.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch_id: String,
    pub input_geometry: [usize; 3],
    pub bottleneck_geometry: [usize; 3],
    /// Weights that are spectrally normalized at use.
    pub spectral: Vec<String>,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new(arch_id: impl Into<String>, input_geometry: [usize; 3], bottleneck_geometry: [usize; 3]) -> Self {
        Self {
            arch_id: arch_id.into(),
            input_geometry,
            bottleneck_geometry,
            spectral: Vec::new(),
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            var: Var::from_tensor(&value)?,
            trainable,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .map(|e| e.var.as_tensor().clone())
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn is_spectral(&self, name: &str) -> bool {
        self.spectral.iter().any(|s| s == name)
    }

    /// Overwrites a value in place; the shape must match.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if entry.var.dims() != value.dims() {
            return Err(Error::shape(
                name,
                format!("expected {:?}, got {:?}", entry.var.dims(), value.dims()),
            ));
        }
        entry.var.set(&value.to_dtype(entry.var.dtype())?)?;
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.entries.first().map(|e| e.var.dtype()).unwrap_or(DType::F32)
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable_vars_with_prefix("")
    }

    pub fn trainable_vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Deep copy of every value, for rollback.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.entries.iter().map(|e| Ok(e.var.as_tensor().copy()?)).collect()
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::Config("snapshot does not match parameter set".into()));
        }
        for (e, t) in self.entries.iter().zip(snapshot) {
            e.var.set(t)?;
        }
        Ok(())
    }

    /// Copies every entry of `other` whose name starts with `prefix` and exists here with the
    /// same shape. Returns the number copied.
    pub fn copy_matching(&self, other: &ModelParams, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for e in other.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            if let Some(mine) = self.get(&e.name) {
                if mine.var.dims() == e.var.dims() {
                    mine.var.set(&e.var.as_tensor().to_dtype(mine.var.dtype())?)?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    pub fn all_finite(&self) -> Result<bool> {
        for e in &self.entries {
            let v = crate::ops::to_f64_vec(e.var.as_tensor())?;
            if v.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            if !is_buffer_name(&e.name) {
                e.trainable = trainable;
            }
        }
    }

    /// Sets the flag of one named entry, buffers included.
    pub fn set_trainable_exact(&mut self, name: &str, trainable: bool) {
        if let Some(&i) = self.index.get(name) {
            self.entries[i].trainable = trainable;
        }
    }
}

pub(crate) fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var") || name.ends_with("_u") || name.ends_with("_v")
}
