//! Matrix file I/O for the CLI: whitespace text (`.txt`) or the binary
//! tensor container (anything else, canonically `.lxsw`).

use std::path::Path;

use anyhow::{Context, Result};
use loraxs_core::linalg::Matrix;
use loraxs_core::registry::{load_single_tensor, save_tensors, StorageDtype};

fn is_text(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("txt")
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    if is_text(path) {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Matrix::from_text(&text)?)
    } else {
        Ok(load_single_tensor(path)?)
    }
}

pub fn write_matrix(path: &Path, m: &Matrix, name: &str) -> Result<()> {
    if is_text(path) {
        std::fs::write(path, m.to_text()).with_context(|| format!("writing {}", path.display()))?;
    } else {
        save_tensors(path, &[(name, m)], StorageDtype::F64)?;
    }
    Ok(())
}
