//! Named, seeded parameter storage shared by every network block.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FuseError, Result};

/// Host-side copy of a parameter array. Values are widened to f64, which is
/// lossless for f32 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }
}

pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect()
    }

    pub fn snapshot(&self) -> Result<Vec<NamedArray>> {
        self.vars
            .iter()
            .map(|(k, v)| NamedArray::from_tensor(k.clone(), v.as_tensor()))
            .collect()
    }

    /// Overwrites parameter values in place. Callers validate names and shapes
    /// beforehand; this only refuses arrays that do not fit.
    pub fn assign(&self, arrays: &[NamedArray]) -> Result<()> {
        for arr in arrays {
            let var = self
                .vars
                .get(&arr.name)
                .ok_or_else(|| FuseError::shape(format!("unknown parameter `{}`", arr.name)))?;
            if var.dims() != arr.shape.as_slice() {
                return Err(FuseError::shape(format!(
                    "parameter `{}`: expected {:?}, got {:?}",
                    arr.name,
                    var.dims(),
                    arr.shape
                )));
            }
            var.set(&arr.to_tensor(self.dtype, &self.device)?)?;
        }
        Ok(())
    }

    /// Resets every parameter whose name starts with `prefix` to i.i.d.
    /// normal values with the given standard deviation.
    pub fn randomize(&self, prefix: &str, std: f64, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, var) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let data: Vec<f64> = (0..var.elem_count())
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let arr = NamedArray {
                name: name.clone(),
                shape: var.dims().to_vec(),
                data,
            };
            var.set(&arr.to_tensor(self.dtype, &self.device)?)?;
        }
        Ok(())
    }

    /// Sets every parameter under `prefix` to zero.
    pub fn zero(&self, prefix: &str) -> Result<()> {
        for (_, var) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            var.set(&var.zeros_like()?)?;
        }
        Ok(())
    }

    fn create(&mut self, name: String, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(FuseError::config(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }
}

/// A name prefix into a [`ParamStore`]; blocks allocate their weights through it.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: &mut *self.store,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Normal(0, std) truncated at two standard deviations by resampling.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let rng = &mut self.store.rng;
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break std * z;
                }
            })
            .collect();
        let full = self.full(name);
        self.store.create(full, shape, data)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        let full = self.full(name);
        self.store.create(full, shape, vec![0.0; n])
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        let full = self.full(name);
        self.store.create(full, shape, vec![1.0; n])
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let full = self.full(name);
        self.store.create(full, shape, vec![value; n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let make = || {
            let mut store = ParamStore::new(DType::F32, 7);
            let mut root = store.root();
            let mut blk = root.sub("blk");
            blk.trunc_normal("w", &[4, 4], 0.02).unwrap();
            store.snapshot().unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn trunc_normal_stays_within_two_sigma() {
        let mut store = ParamStore::new(DType::F64, 1);
        store.root().trunc_normal("w", &[1000], 0.02).unwrap();
        let snap = store.snapshot().unwrap();
        assert!(snap[0].data.iter().all(|v| v.abs() <= 0.04 + 1e-12));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new(DType::F32, 0);
        let mut root = store.root();
        root.zeros("a", &[1]).unwrap();
        assert!(root.zeros("a", &[1]).is_err());
    }

    #[test]
    fn assign_round_trips_through_snapshot() {
        let mut store = ParamStore::new(DType::F32, 3);
        store.root().sub("x").trunc_normal("w", &[3, 2], 1.0).unwrap();
        let snap = store.snapshot().unwrap();
        store.zero("").unwrap();
        store.assign(&snap).unwrap();
        assert_eq!(store.snapshot().unwrap(), snap);
        assert_eq!(store.count("x."), 6);
    }
}
