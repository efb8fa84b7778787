//! Checkpoints: a directory with a `manifest.txt` plus one binary tensor
//! file per named parameter, buffer, and optimizer moment.
//!
//! Tensor files carry a dims header (`u32` rank, then `u32` dims,
//! little-endian) followed by the raw little-endian payload — the same
//! numeric format as `.tvol` payloads. Round trips are bit-exact. Writes
//! go to a temp directory renamed into place.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{ModelState, TrainConfig, TrainError};
use crate::latent::Direction;
use crate::networks::{GeneratorNet, NetConfig};
use crate::nn::Scalar;
use crate::rng::Rng;
use crate::volume_io::Dims;

const CHECKPOINT_VERSION: u32 = 1;

fn ck_err(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("tensors").join(format!("{name}.bin"))
}

fn write_tensor<T: Scalar>(dir: &Path, name: &str, shape: &[usize], data: &[T]) -> Result<(), TrainError> {
    let path = tensor_path(dir, name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| super::io_err(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(4 + 4 * shape.len() + data.len() * T::ELEM_BYTES);
    bytes.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        v.write_le(&mut bytes);
    }
    std::fs::write(&path, bytes).map_err(|e| super::io_err(&path, e))
}

fn read_tensor<T: Scalar>(dir: &Path, name: &str, expect_len: usize) -> Result<Vec<T>, TrainError> {
    let path = tensor_path(dir, name);
    let bytes = std::fs::read(&path)
        .map_err(|_| ck_err(format!("missing or unreadable tensor {name:?}")))?;
    let need = |n: usize| -> Result<(), TrainError> {
        if bytes.len() < n {
            Err(ck_err(format!("tensor {name:?} truncated ({} bytes)", bytes.len())))
        } else {
            Ok(())
        }
    };
    need(4)?;
    let rank = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    need(4 + 4 * rank)?;
    let mut len = 1usize;
    for i in 0..rank {
        let d = u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        len *= d;
    }
    if len != expect_len {
        return Err(ck_err(format!(
            "tensor {name:?} has {len} elements, expected {expect_len}"
        )));
    }
    let header = 4 + 4 * rank;
    if bytes.len() != header + len * T::ELEM_BYTES {
        return Err(ck_err(format!(
            "tensor {name:?} payload size mismatch ({} bytes)",
            bytes.len()
        )));
    }
    Ok(bytes[header..]
        .chunks(T::ELEM_BYTES)
        .map(|c| T::read_le(c))
        .collect())
}

fn manifest_string<T: Scalar>(state: &ModelState<T>, config: &TrainConfig, dims: Dims) -> String {
    let net = config.net_config(dims);
    let attention_level = match net.attention_level {
        Some(l) => l.to_string(),
        None => "auto".into(),
    };
    format!(
        "version = {CHECKPOINT_VERSION}\n\
         iteration = {}\n\
         config_hash = {}\n\
         rng_state = {:016x}\n\
         adam_t_g = {}\n\
         adam_t_d_im = {}\n\
         adam_t_d_temp = {}\n\
         elem_bytes = {}\n\
         latent_size = {}\n\
         base_channels = {}\n\
         num_levels = {}\n\
         volume_dims = {}\n\
         use_self_attention = {}\n\
         attention_level = {attention_level}\n\
         spectral_norm = {}\n",
        state.iteration,
        config.hash(),
        state.rng.state(),
        state.opt_g.t(),
        state.opt_d_im.t(),
        state.opt_d_temp.t(),
        T::ELEM_BYTES,
        net.latent_size,
        net.base_channels,
        net.num_levels,
        net.volume_dims,
        net.use_self_attention,
        net.spectral_norm,
    )
}

fn parse_manifest(path: &Path) -> Result<BTreeMap<String, String>, TrainError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| ck_err(format!("missing manifest {}", path.display())))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ck_err(format!("bad manifest line {line:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn manifest_get<'a>(
    map: &'a BTreeMap<String, String>,
    key: &str,
) -> Result<&'a String, TrainError> {
    map.get(key)
        .ok_or_else(|| ck_err(format!("manifest missing key {key:?}")))
}

fn manifest_parse<F: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
) -> Result<F, TrainError> {
    manifest_get(map, key)?
        .parse()
        .map_err(|_| ck_err(format!("manifest key {key:?} has bad value")))
}

/// Serialize the full training state. Atomic: written to `<dir>.tmp`, then
/// renamed.
pub fn save_checkpoint<T: Scalar>(
    state: &mut ModelState<T>,
    config: &TrainConfig,
    dir: &Path,
) -> Result<(), TrainError> {
    let volume_dims = state.generator.cfg().volume_dims;

    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| super::io_err(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| super::io_err(&tmp, e))?;

    std::fs::write(
        tmp.join("manifest.txt"),
        manifest_string(state, config, volume_dims),
    )
    .map_err(|e| super::io_err(&tmp, e))?;

    let mut result = Ok(());
    state.visit_all_params(&mut |name, p| {
        if result.is_ok() {
            result = write_tensor(&tmp, &name, &p.shape, &p.value);
        }
    });
    result?;
    let mut result = Ok(());
    state.visit_all_buffers(&mut |name, buf| {
        if result.is_ok() {
            result = write_tensor(&tmp, &name, &[buf.len()], buf);
        }
    });
    result?;

    for (opt_name, opt) in [
        ("opt/g", &mut state.opt_g),
        ("opt/d_im", &mut state.opt_d_im),
        ("opt/d_temp", &mut state.opt_d_temp),
    ] {
        let mut result = Ok(());
        opt.visit_state(|i, m, v| {
            if result.is_ok() {
                result = write_tensor(&tmp, &format!("{opt_name}/slot{i:03}/m"), &[m.len()], m);
            }
            if result.is_ok() {
                result = write_tensor(&tmp, &format!("{opt_name}/slot{i:03}/v"), &[v.len()], v);
            }
        });
        result?;
    }

    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| super::io_err(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| super::io_err(dir, e))
}

/// Restore a full training state for `resume`. The config must hash to the
/// value recorded at save time.
pub fn load_checkpoint<T: Scalar>(
    dir: &Path,
    config: &TrainConfig,
    dims: Dims,
) -> Result<ModelState<T>, TrainError> {
    let map = parse_manifest(&dir.join("manifest.txt"))?;
    let version: u32 = manifest_parse(&map, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ck_err(format!("unsupported checkpoint version {version}")));
    }
    let saved_hash = manifest_get(&map, "config_hash")?;
    if *saved_hash != config.hash() {
        return Err(ck_err(format!(
            "config hash mismatch: checkpoint {saved_hash}, current {}",
            config.hash()
        )));
    }
    let elem_bytes: usize = manifest_parse(&map, "elem_bytes")?;
    if elem_bytes != T::ELEM_BYTES {
        return Err(ck_err(format!(
            "element size mismatch: checkpoint {elem_bytes}, current {}",
            T::ELEM_BYTES
        )));
    }

    let mut state = ModelState::<T>::new(config, dims)?;
    state.iteration = manifest_parse(&map, "iteration")?;
    let rng_state = u64::from_str_radix(manifest_get(&map, "rng_state")?, 16)
        .map_err(|_| ck_err("bad rng_state"))?;
    state.rng = Rng::from_state(rng_state);

    let mut result = Ok(());
    let mut sizes = Vec::new();
    state.visit_all_params(&mut |name, p| {
        sizes.push(p.len());
        if result.is_ok() {
            match read_tensor::<T>(dir, &name, p.len()) {
                Ok(v) => p.value = v,
                Err(e) => result = Err(e),
            }
        }
    });
    result?;
    let mut result = Ok(());
    state.visit_all_buffers(&mut |name, buf| {
        if result.is_ok() {
            match read_tensor::<T>(dir, &name, buf.len()) {
                Ok(v) => *buf = v,
                Err(e) => result = Err(e),
            }
        }
    });
    result?;

    // Optimizer slots: the generator optimizer covers generator params plus
    // the direction; discriminator optimizers cover their own nets.
    let g_count = {
        let mut c = 0;
        state.generator.visit_params("g", &mut |_, _| c += 1);
        c + 1
    };
    let d_im_count = {
        let mut c = 0;
        state.d_im.visit_params("d", &mut |_, _| c += 1);
        c
    };
    let g_sizes: Vec<usize> = sizes[..g_count - 1]
        .iter()
        .copied()
        .chain([config.latent_size])
        .collect();
    let d_im_sizes: Vec<usize> = sizes[g_count - 1..g_count - 1 + d_im_count].to_vec();
    let d_temp_sizes: Vec<usize> = sizes[g_count - 1 + d_im_count..sizes.len() - 1].to_vec();

    for (opt_name, opt, opt_sizes, t_key) in [
        ("opt/g", &mut state.opt_g, g_sizes, "adam_t_g"),
        ("opt/d_im", &mut state.opt_d_im, d_im_sizes, "adam_t_d_im"),
        ("opt/d_temp", &mut state.opt_d_temp, d_temp_sizes, "adam_t_d_temp"),
    ] {
        opt.ensure_slots(&opt_sizes);
        opt.set_t(manifest_parse(&map, t_key)?);
        let mut result = Ok(());
        opt.visit_state(|i, m, v| {
            if result.is_ok() {
                match read_tensor::<T>(dir, &format!("{opt_name}/slot{i:03}/m"), m.len()) {
                    Ok(x) => *m = x,
                    Err(e) => result = Err(e),
                }
            }
            if result.is_ok() {
                match read_tensor::<T>(dir, &format!("{opt_name}/slot{i:03}/v"), v.len()) {
                    Ok(x) => *v = x,
                    Err(e) => result = Err(e),
                }
            }
        });
        result?;
    }

    Ok(state)
}

/// A generator plus direction restored for inference-side tools.
pub struct EvalModel {
    pub generator: GeneratorNet<f32>,
    pub direction: Direction<f32>,
    pub net_config: NetConfig,
    pub iteration: u64,
}

/// Load only what evaluation needs (no dataset, no optimizer state).
pub fn load_generator_for_eval(dir: &Path) -> Result<EvalModel, TrainError> {
    let map = parse_manifest(&dir.join("manifest.txt"))?;
    let version: u32 = manifest_parse(&map, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ck_err(format!("unsupported checkpoint version {version}")));
    }
    let dims_str = manifest_get(&map, "volume_dims")?;
    let parts: Vec<usize> = dims_str
        .split('x')
        .map(|p| p.parse().map_err(|_| ck_err("bad volume_dims")))
        .collect::<Result<_, _>>()?;
    if parts.len() != 3 {
        return Err(ck_err("bad volume_dims"));
    }
    let attention_level = match manifest_get(&map, "attention_level")?.as_str() {
        "auto" => None,
        other => Some(other.parse().map_err(|_| ck_err("bad attention_level"))?),
    };
    let net_config = NetConfig {
        latent_size: manifest_parse(&map, "latent_size")?,
        base_channels: manifest_parse(&map, "base_channels")?,
        num_levels: manifest_parse(&map, "num_levels")?,
        volume_dims: Dims::new(parts[0], parts[1], parts[2]),
        use_self_attention: manifest_parse(&map, "use_self_attention")?,
        attention_level,
        spectral_norm: manifest_parse(&map, "spectral_norm")?,
    };
    let elem_bytes: usize = manifest_parse(&map, "elem_bytes")?;
    if elem_bytes != 4 {
        return Err(ck_err("evaluation loading expects f32 checkpoints"));
    }

    let mut generator = GeneratorNet::<f32>::new(net_config.clone(), &mut Rng::new(0))?;
    let mut result = Ok(());
    generator.visit_params("g_im", &mut |name, p| {
        if result.is_ok() {
            match read_tensor::<f32>(dir, &name, p.len()) {
                Ok(v) => p.value = v,
                Err(e) => result = Err(e),
            }
        }
    });
    result?;
    let raw = read_tensor::<f32>(dir, "direction/raw", net_config.latent_size)?;
    Ok(EvalModel {
        generator,
        direction: Direction::new(raw),
        net_config,
        iteration: manifest_parse(&map, "iteration")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_shift_sequence, SynthConfig, SynthKind};
    use crate::training::{train_step, TrainData};
    use crate::volume_io::Volume;

    fn tiny_config(out: &Path) -> TrainConfig {
        let mut cfg = TrainConfig::defaults("unused".into(), out.to_path_buf());
        cfg.batch_size = 2;
        cfg.latent_size = 6;
        cfg.base_channels = 2;
        cfg.num_levels = 2;
        cfg.attention_level = Some(0);
        cfg.seed = 3;
        cfg
    }

    fn tiny_data() -> TrainData {
        let synth = SynthConfig {
            kind: SynthKind::Shift,
            dims: Dims::cubic(8),
            num_patients: 2,
            steps_per_sequence: 3,
            magnitude_range: (-1.0, 1.0),
            seed: 5,
            tumor_free_fraction: 0.0,
        };
        let sequences: Vec<Vec<Volume>> = (0..2)
            .map(|p| generate_shift_sequence(&synth, p).unwrap().volumes)
            .collect();
        TrainData::from_sequences(sequences).unwrap()
    }

    fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        fn walk(dir: &Path, base: &Path, out: &mut Vec<(String, Vec<u8>)>) {
            let mut entries: Vec<_> = std::fs::read_dir(dir)
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            entries.sort();
            for p in entries {
                if p.is_dir() {
                    walk(&p, base, out);
                } else {
                    let rel = p.strip_prefix(base).unwrap().display().to_string();
                    out.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        walk(dir, dir, &mut files);
        files
    }

    #[test]
    fn save_load_save_produces_identical_bytes() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        let data = tiny_data();
        let mut state = ModelState::<f32>::new(&cfg, data.dims).unwrap();
        for _ in 0..3 {
            train_step(&mut state, &data, &cfg).unwrap();
        }
        let ck1 = tmp.path().join("ck1");
        save_checkpoint(&mut state, &cfg, &ck1).unwrap();
        let mut restored = load_checkpoint::<f32>(&ck1, &cfg, data.dims).unwrap();
        let ck2 = tmp.path().join("ck2");
        save_checkpoint(&mut restored, &cfg, &ck2).unwrap();
        assert_eq!(dir_digest(&ck1), dir_digest(&ck2));
    }

    #[test]
    fn restored_state_continues_identically() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        let data = tiny_data();
        let mut state = ModelState::<f32>::new(&cfg, data.dims).unwrap();
        for _ in 0..2 {
            train_step(&mut state, &data, &cfg).unwrap();
        }
        let ck = tmp.path().join("ck");
        save_checkpoint(&mut state, &cfg, &ck).unwrap();

        let mut cont: Vec<(f64, f64, f64)> = Vec::new();
        for _ in 0..3 {
            let l = train_step(&mut state, &data, &cfg).unwrap();
            cont.push((l.d_im.total, l.d_temp.total, l.g.total));
        }
        let mut restored = load_checkpoint::<f32>(&ck, &cfg, data.dims).unwrap();
        let mut resumed = Vec::new();
        for _ in 0..3 {
            let l = train_step(&mut restored, &data, &cfg).unwrap();
            resumed.push((l.d_im.total, l.d_temp.total, l.g.total));
        }
        assert_eq!(cont, resumed);
    }

    #[test]
    fn missing_tensor_is_reported_by_name() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        let data = tiny_data();
        let mut state = ModelState::<f32>::new(&cfg, data.dims).unwrap();
        train_step(&mut state, &data, &cfg).unwrap();
        let ck = tmp.path().join("ck");
        save_checkpoint(&mut state, &cfg, &ck).unwrap();
        std::fs::remove_file(ck.join("tensors/d_im/head/weight.bin")).unwrap();
        match load_checkpoint::<f32>(&ck, &cfg, data.dims) {
            Ok(_) => panic!("load succeeded despite missing tensor"),
            Err(err) => assert!(
                err.to_string().contains("d_im/head/weight"),
                "error should name the tensor: {err}"
            ),
        }
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        let data = tiny_data();
        let mut state = ModelState::<f32>::new(&cfg, data.dims).unwrap();
        train_step(&mut state, &data, &cfg).unwrap();
        let ck = tmp.path().join("ck");
        save_checkpoint(&mut state, &cfg, &ck).unwrap();
        let mut other = cfg.clone();
        other.seed = 999;
        assert!(matches!(
            load_checkpoint::<f32>(&ck, &other, data.dims),
            Err(TrainError::Checkpoint(_))
        ));
    }

    #[test]
    fn eval_loading_restores_direction_invariant_and_generator() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        let data = tiny_data();
        let mut state = ModelState::<f32>::new(&cfg, data.dims).unwrap();
        train_step(&mut state, &data, &cfg).unwrap();
        let ck = tmp.path().join("ck");
        save_checkpoint(&mut state, &cfg, &ck).unwrap();

        let mut eval = load_generator_for_eval(&ck).unwrap();
        let unit = eval.direction.unit().unwrap();
        let norm: f64 = unit.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);

        // Same z through both generators gives identical volumes.
        let z: Vec<f32> = (0..cfg.latent_size).map(|i| (i as f32) * 0.3 - 0.9).collect();
        let a = state.generator.forward(&z, 1);
        let b = eval.generator.forward(&z, 1);
        assert_eq!(a.data(), b.data());
    }
}
