use std::collections::HashSet;
use std::path::Path;

use super::container::{self, Entry};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};

/// Writes every parameter as an f32 entry named after it.
pub fn save_checkpoint<T: Real>(params: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let entries: Vec<Entry> = params
        .iter()
        .map(|p| {
            let v = p.value.cast::<f32>();
            Entry::new(p.name.clone(), v.shape().to_vec(), v.into_data())
        })
        .collect();
    container::write_file(path.as_ref(), &entries)
}

/// Reads a checkpoint as a standalone parameter set.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for e in container::read_file(path.as_ref())? {
        store.register(e.name, Tensor::new(e.dims, e.data)?)?;
    }
    Ok(store)
}

/// Overwrites `params` with a checkpoint holding exactly the same names and
/// shapes.
pub fn load_checkpoint_into<T: Real>(
    params: &mut ParamStore<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let stored = read_checkpoint(path)?;
    let expected: HashSet<&str> = params.iter().map(|p| p.name.as_str()).collect();
    if let Some(unknown) = stored.iter().find(|p| !expected.contains(p.name.as_str())) {
        return Err(Error::Format(format!(
            "{}: unknown parameter {:?}",
            path.display(),
            unknown.name
        )));
    }
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.get(id).name.clone();
        let src = stored.id(&name).ok_or_else(|| {
            Error::Format(format!("{}: missing parameter {name:?}", path.display()))
        })?;
        let value = stored.value(src);
        if value.shape() != params.value(id).shape() {
            return Err(Error::Format(format!(
                "{}: parameter {name:?} has shape {:?}, model expects {:?}",
                path.display(),
                value.shape(),
                params.value(id).shape()
            )));
        }
        *params.value_mut(id) = value.cast();
    }
    Ok(())
}
