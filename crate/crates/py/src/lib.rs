use pyo3::prelude::*;

#[pymodule]
fn refold(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
