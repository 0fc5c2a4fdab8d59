//! Network serialization: a one-line JSON header (architecture and shapes)
//! followed by the flat parameter vector as little-endian f32.
//!
//! Parameters are always stored at single precision regardless of the
//! in-memory scalar type; loading into `f64` widens losslessly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mlp, NetworkConfig};
use crate::blas::Scalar;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: NetworkConfig,
    /// `[rows, cols]` per weight matrix, hidden layers first, head last.
    shapes: Vec<[usize; 2]>,
    param_count: usize,
}

const FORMAT: &str = "refold-mlp";

/// Writes `mlp` to `path`.
pub fn save<F: Scalar>(mlp: &Mlp<F>, path: &Path) -> Result<()> {
    let header = Header {
        format: FORMAT.to_string(),
        version: 1,
        config: mlp.config().clone(),
        shapes: mlp
            .config()
            .layer_shapes()
            .into_iter()
            .map(|(r, c)| [r, c])
            .collect(),
        param_count: mlp.param_count(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)
        .map_err(|e| Error::config(format!("cannot encode checkpoint header: {}", e)))?;
    w.write_all(b"\n")?;
    for &p in mlp.params() {
        w.write_all(&(p.to_f64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back at the requested precision.
pub fn load<F: Scalar>(path: &Path) -> Result<Mlp<F>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::config("checkpoint truncated before end of header"));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 1 << 20 {
            return Err(Error::config("checkpoint header implausibly large"));
        }
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::config(format!("bad checkpoint header: {}", e)))?;
    if header.format != FORMAT {
        return Err(Error::config(format!(
            "not a network checkpoint (format tag {:?})",
            header.format
        )));
    }
    header.config.validate()?;
    if header.param_count != header.config.param_count() {
        return Err(Error::config(format!(
            "header claims {} parameters but the architecture needs {}",
            header.param_count,
            header.config.param_count()
        )));
    }
    let expected_shapes: Vec<[usize; 2]> = header
        .config
        .layer_shapes()
        .into_iter()
        .map(|(a, b)| [a, b])
        .collect();
    if header.shapes != expected_shapes {
        return Err(Error::config("layer shapes disagree with the config"));
    }
    let mut data = vec![0u8; header.param_count * 4];
    r.read_exact(&mut data)
        .map_err(|_| Error::config("checkpoint data shorter than declared"))?;
    let params: Vec<F> = data
        .chunks_exact(4)
        .map(|b| F::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Mlp::from_params(header.config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetworkConfig};

    #[test]
    fn roundtrip_preserves_f32_params_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let cfg = NetworkConfig::new(2, 3)
            .with_channels(8)
            .with_bands(2)
            .with_activation(Activation::Sigmoid);
        let mlp = Mlp::<f32>::init(cfg, 99).unwrap();
        save(&mlp, &path).unwrap();
        let loaded: Mlp<f32> = load(&path).unwrap();
        assert_eq!(loaded.config(), mlp.config());
        assert_eq!(loaded.params(), mlp.params());
    }

    #[test]
    fn f64_load_widens_and_outputs_match() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mlp = Mlp::<f32>::init(NetworkConfig::new(1, 1).with_channels(4).with_bands(1), 5).unwrap();
        save(&mlp, &path).unwrap();
        let wide: Mlp<f64> = load(&path).unwrap();
        let a = mlp.forward(&[0.42f32])[0] as f64;
        let b = wide.forward(&[0.42f64])[0];
        assert!((a - b).abs() < 1e-5, "f32 {} vs widened {}", a, b);
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"{\"format\":\"something-else\"}\n").unwrap();
        assert!(load::<f32>(&path).is_err());
        std::fs::write(&path, b"not json at all").unwrap();
        assert!(load::<f32>(&path).is_err());
    }

    #[test]
    fn truncated_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ckpt");
        let mlp = Mlp::<f32>::init(NetworkConfig::new(1, 1).with_channels(4).with_bands(1), 5).unwrap();
        save(&mlp, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 10]).unwrap();
        assert!(load::<f32>(&path).is_err());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mlp = Mlp::<f64>::init(NetworkConfig::new(2, 1), 7).unwrap();
        save(&mlp, &p1).unwrap();
        save(&mlp, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
