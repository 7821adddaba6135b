//! Named trainable tensors and the `FREC` checkpoint format.
//!
//! Layout (little-endian): magic `FREC`, u32 version = 1, u32 tensor count,
//! then per tensor a u16 name length, the UTF-8 name, a u8 rank, `rank` u32
//! dimensions and the row-major `f64` values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const FREC_MAGIC: &[u8; 4] = b"FREC";
const FREC_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered collection of named parameters with gradient slots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bindings {
    /// Binds names to existing handles, e.g. the leaves of a gradient check.
    pub fn from_vars<S: AsRef<str>>(names: &[S], vars: &[Var]) -> Result<Self> {
        if names.len() != vars.len() {
            return Err(Error::Contract(format!(
                "{} names for {} handles",
                names.len(),
                vars.len()
            )));
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_ref().to_string(), i))
            .collect();
        Ok(Bindings {
            vars: vars.to_vec(),
            index,
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.params[i].value = value;
            self.params[i].grad = None;
        } else {
            self.index.insert(name.clone(), self.params.len());
            self.params.push(Parameter {
                name,
                value,
                grad: None,
            });
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Registers every parameter as a trainable leaf on `g`.
    pub fn bind(&self, g: &Graph) -> Bindings {
        let vars = self.params.iter().map(|p| g.leaf(p.value.clone())).collect();
        Bindings {
            vars,
            index: self.index.clone(),
        }
    }

    /// Registers every parameter as a frozen constant (inference).
    pub fn bind_frozen(&self, g: &Graph) -> Bindings {
        let vars = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        Bindings {
            vars,
            index: self.index.clone(),
        }
    }

    /// Adds the gradients recorded on `g` into the gradient slots. Parameters
    /// the backward pass never reached keep their previous slot.
    pub fn accumulate_grads(&mut self, g: &Graph, bindings: &Bindings) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.vars) {
            let Some(grad) = g.grad(v) else { continue };
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(grad),
            }
        }
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    pub fn from_named(named: Vec<(String, Tensor)>) -> Self {
        let mut store = ParameterStore::new();
        for (name, t) in named {
            store.insert(name, t);
        }
        store
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_named())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(ParameterStore::from_named(read_checkpoint(path)?))
    }
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    decode_tensors(&mut r)
}

pub fn encode_tensors<W: Write>(w: &mut W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(FREC_MAGIC)?;
    w.write_all(&FREC_VERSION.to_le_bytes())?;
    w.write_all(
        &u32::try_from(tensors.len())
            .map_err(|_| too_large("tensor count"))?
            .to_le_bytes(),
    )?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| too_large("tensor name"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| too_large("tensor rank"))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| too_large("tensor dimension"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn decode_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != FREC_MAGIC {
        return Err(Error::Format("not a FREC checkpoint".into()));
    }
    let version = read_u32(r)?;
    if version != FREC_VERSION {
        return Err(Error::Format(format!("unsupported FREC version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(r, &mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(r, &mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

fn too_large(what: &str) -> Error {
    Error::Format(format!("{what} does not fit the FREC format"))
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("unexpected end of file".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
