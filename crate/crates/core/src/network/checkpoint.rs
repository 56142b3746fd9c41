use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{Model, NetworkConfig};
use crate::nn::{Module, Slot};
use crate::tensor::Real;
use crate::{Error, Result};

/// Value of the `format` metadata entry written into every checkpoint.
pub const CHECKPOINT_FORMAT: &str = "diresnet-checkpoint/1";

/// Writes all parameters and normalization buffers as little-endian f32
/// tensors keyed by module path, with the network config in the metadata.
pub fn save_checkpoint<T: Real>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let config = serde_json::to_string(model.config()).expect("config serializes");
    let mut entries: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    model.visit("", &mut |name, slot| {
        let (dims, values): (Vec<usize>, &[T]) = match slot {
            Slot::Param(p) => (p.dims.clone(), &p.value),
            Slot::Buffer(b) => (vec![b.len()], b),
        };
        let bytes = values.iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect();
        entries.insert(name.to_string(), (dims, bytes));
    });
    let views = entries
        .iter()
        .map(|(name, (dims, bytes))| {
            let view = TensorView::new(Dtype::F32, dims.clone(), bytes).expect("consistent tensor view");
            (name.clone(), view)
        })
        .collect::<Vec<_>>();
    let metadata = HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("config".to_string(), config),
    ]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::tensor::serialize_to_file(views, Some(metadata), path).map_err(|e| Error::Checkpoint {
        path: path.into(),
        reason: e.to_string(),
    })
}

/// Rebuilds the model stored at `path`. Fails on a missing or foreign format
/// tag, a config that does not validate, or any missing or mis-shaped tensor.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.into(),
        reason,
    };
    let buffer = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&buffer).map_err(|e| bad(e.to_string()))?;
    let info = meta.metadata().clone().unwrap_or_default();
    match info.get("format") {
        Some(f) if f == CHECKPOINT_FORMAT => {}
        Some(f) => return Err(bad(format!("unsupported format tag {f:?} (expected {CHECKPOINT_FORMAT:?})"))),
        None => return Err(bad("missing format tag".into())),
    }
    let config: NetworkConfig = serde_json::from_str(info.get("config").ok_or_else(|| bad("missing config".into()))?)
        .map_err(|e| bad(format!("config: {e}")))?;
    let tensors = SafeTensors::deserialize(&buffer).map_err(|e| bad(e.to_string()))?;
    let mut model = Model::new(&config, 0)?;
    let mut failure = None;
    let mut seen = 0;
    model.visit("", &mut |name, slot| {
        if failure.is_some() {
            return;
        }
        let (dims, values): (Vec<usize>, &mut [T]) = match slot {
            Slot::Param(p) => (p.dims.clone(), &mut p.value),
            Slot::Buffer(b) => (vec![b.len()], b),
        };
        let view = match tensors.tensor(name) {
            Ok(v) => v,
            Err(_) => {
                failure = Some(format!("missing tensor {name}"));
                return;
            }
        };
        if view.dtype() != Dtype::F32 || view.shape() != dims.as_slice() {
            failure = Some(format!("tensor {name}: stored {:?} {:?}, expected F32 {dims:?}", view.dtype(), view.shape()));
            return;
        }
        for (v, chunk) in values.iter_mut().zip(view.data().chunks_exact(4)) {
            *v = T::lit(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
        }
        seen += 1;
    });
    if let Some(reason) = failure {
        return Err(bad(reason));
    }
    if seen != tensors.len() {
        return Err(bad(format!("{} stored tensors but the model has {seen}", tensors.len())));
    }
    Ok(model)
}
