use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor_io::{read_f64_with_shape, write_tensor, RawTensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// How a tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `±1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub init: Init,
}

/// Named parameter tensors stored back to back in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            specs: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    /// Registers a zero-valued tensor.
    pub(crate) fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let len = shape.iter().product();
        let offset = self.data.len();
        self.data.resize(offset + len, 0.0);
        self.index.insert(name.clone(), self.specs.len());
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            offset,
            len,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    /// Fills every tensor per its [`Init`]; tensor `i` draws from stream `seed / i`.
    pub fn initialize(&mut self, seed: u64) {
        let root = StreamRng::new(seed);
        for (i, spec) in self.specs.iter().enumerate() {
            let values = &mut self.data[spec.offset..spec.offset + spec.len];
            match spec.init {
                Init::Zeros => values.fill(0.0),
                Init::Ones => values.fill(1.0),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let mut rng = root.fork(i as u64);
                    values.iter_mut().for_each(|v| *v = rng.uniform_range(-bound, bound));
                }
            }
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn range(&self, id: ParamId) -> Range<usize> {
        let s = &self.specs[id.0];
        s.offset..s.offset + s.len
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[self.range(id)]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.range(self.id(name)?);
        Some(&mut self.data[r])
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Name of the tensor holding flat index `i`.
    pub fn name_of(&self, i: usize) -> &str {
        let k = self.specs.partition_point(|s| s.offset + s.len <= i);
        &self.specs[k].name
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes one f64 tensor file per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &self.specs {
            let values = self.data[s.offset..s.offset + s.len].to_vec();
            write_tensor(&dir.join(format!("{}.wfmt", s.name)), &RawTensor::f64(s.shape.clone(), values))?;
        }
        Ok(())
    }

    /// Loads values for an already-laid-out store, validating every shape.
    pub fn load_values(&mut self, dir: &Path) -> Result<()> {
        for s in &self.specs {
            let values = read_f64_with_shape(&dir.join(format!("{}.wfmt", s.name)), &s.shape)?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {}", s.name)));
            }
            self.data[s.offset..s.offset + s.len].copy_from_slice(&values);
        }
        Ok(())
    }
}
