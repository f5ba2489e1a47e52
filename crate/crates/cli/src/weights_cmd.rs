//! `weights gen` / `weights inspect` implementations.

use std::fmt::Write as _;
use std::path::Path;

use edit_core::weights::{generate, Provenance, WeightStore};
use edit_core::{AttentionConfig, Result};

/// Generates the full manifest for `cfg` from `seed` and saves it.
pub fn gen(cfg: &AttentionConfig, seed: u64, out: &Path) -> Result<String> {
    let store = generate(cfg, seed)?;
    store.save(out)?;
    Ok(format!(
        "wrote {} tensors ({} parameters) for `{}` to {}\n",
        store.len(),
        total_params(&store),
        cfg.mechanism.id(),
        out.display()
    ))
}

fn total_params(store: &WeightStore) -> usize {
    store.iter().map(|(_, t)| t.len()).sum()
}

/// Loads a container and lists its contents.
pub fn inspect(path: &Path) -> Result<String> {
    let store = WeightStore::load(path)?;
    let mut out = String::new();
    writeln!(out, "{}: {} tensors", path.display(), store.len()).unwrap();
    if let Provenance::Loaded(p) = store.provenance() {
        debug_assert_eq!(p, path);
    }
    for (name, t) in store.iter() {
        writeln!(out, "  {:<34} {:>12} {:>10} values", name, format!("{:?}", t.dims()), t.len())
            .unwrap();
    }
    writeln!(out, "total parameters: {}", total_params(&store)).unwrap();
    Ok(out)
}
