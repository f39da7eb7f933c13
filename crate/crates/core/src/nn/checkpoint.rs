//! Single-file JSON checkpoints with a format tag and version.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    payload: T,
}

/// Writes `payload` under the given format tag. Floats round-trip bit-exactly.
pub fn save<T: Serialize>(path: &Path, format: &str, payload: &T) -> Result<()> {
    let env = Envelope {
        format: format.to_string(),
        version: CHECKPOINT_VERSION,
        payload,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec(&env)?)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let bytes = fs::read(path)?;
    let env: Envelope<T> = serde_json::from_slice(&bytes)?;
    if env.format != format {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected a `{format}` checkpoint, found `{}`", env.format),
        });
    }
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported checkpoint version {}", env.version),
        });
    }
    Ok(env.payload)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Module;

    #[test]
    fn wrong_format_tag_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save(&path, "module", &Module::Relu).unwrap();
        assert!(load::<Module>(&path, "detector").is_err());
        assert_eq!(load::<Module>(&path, "module").unwrap(), Module::Relu);
    }

    #[test]
    fn module_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Module::sequential(vec![
            Module::conv2d(1, 2, 3, &mut rng),
            Module::Relu,
            Module::maxpool2d(2, 2),
            Module::Flatten,
            Module::dense(8, 1, &mut rng),
            Module::dropout(0.4).unwrap(),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save(&path, "module", &m).unwrap();
        let back: Module = load(&path, "module").unwrap();
        let bits = |m: &Module| -> Vec<u64> {
            m.parameters().iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&m), bits(&back));
        assert_eq!(m, back);
    }
}
