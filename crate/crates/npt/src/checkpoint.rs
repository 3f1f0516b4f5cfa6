//! Bit-exact binary checkpoints.
//!
//! Layout: magic `NPTC`, u32 version (currently 1), u32 tensor count;
//! per tensor a u16 name length, the UTF-8 name, a u8 rank, u64 dims,
//! then the raw f32 values little-endian; finally a u64-length-prefixed
//! UTF-8 JSON blob carrying the run config, the fitted schema, and the
//! global step. Save -> load -> save reproduces the file byte for byte.
//!
//! The schema's f64 statistics ride in the JSON blob, so bit-exact
//! loading depends on serde_json's `float_roundtrip` feature: default
//! parsing is best-effort and can come back one ulp off.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::FittedSchema;
use crate::error::{NptError, Result};
use crate::model::{NptParams, RunConfig};
use crate::rng::DeterministicRng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NPTC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: RunConfig,
    fitted: FittedSchema,
    step: u64,
}

pub fn save_checkpoint(params: &NptParams<f32>, config: &RunConfig, path: &Path) -> Result<()> {
    if !params.all_finite() {
        return Err(NptError::internal(
            "refusing to save checkpoint with non-finite parameters",
        ));
    }
    let named = params.named();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in &named {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(NptError::internal(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(NptError::internal(format!("tensor rank too large: {name}")));
        }
        buf.push(shape.len() as u8);
        for &dim in shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in tensor.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = Meta {
        config: config.clone(),
        fitted: params.embed.fitted.clone(),
        step: params.step,
    };
    let json = serde_json::to_vec(&meta)
        .map_err(|e| NptError::internal(format!("checkpoint metadata serialization: {e}")))?;
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    std::fs::write(path, &buf)
        .map_err(|e| NptError::data(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(NptError::data(format!(
                "checkpoint truncated at byte {}: expected {n} more bytes for {what}",
                self.at
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Rebuilds the parameter set, run config, and global step from a
/// checkpoint file. Errors report the byte offset of the problem.
pub fn load_checkpoint(path: &Path) -> Result<(NptParams<f32>, RunConfig)> {
    let bytes = std::fs::read(path)
        .map_err(|e| NptError::data(format!("reading {}: {e}", path.display())))?;
    let mut r = Reader { bytes: &bytes, at: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(NptError::data(format!(
            "{} is not a checkpoint: bad magic at byte 0",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(NptError::data(format!(
            "unsupported checkpoint version {version} at byte 4 (expected {VERSION})"
        )));
    }
    let count = r.u32("tensor count")? as usize;

    let mut triples = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("tensor {i} name length");
        let name_len = r.u16(&what)? as usize;
        let name_at = r.at;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| {
                NptError::data(format!("tensor {i} name at byte {name_at} is not UTF-8"))
            })?
            .to_string();
        let rank = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        triples.push((name, shape, data));
    }

    let json_len = r.u64("metadata length")? as usize;
    let json_at = r.at;
    let json = r.take(json_len, "metadata")?;
    if r.at != bytes.len() {
        return Err(NptError::data(format!(
            "checkpoint has {} trailing bytes after byte {}",
            bytes.len() - r.at,
            r.at
        )));
    }
    let meta: Meta = serde_json::from_slice(json).map_err(|e| {
        NptError::data(format!("checkpoint metadata at byte {json_at} is invalid: {e}"))
    })?;

    let mut params = NptParams::init(meta.fitted, &meta.config, &mut DeterministicRng::new(0))?;
    params.assign_named(&triples)?;
    params.step = meta.step;
    Ok((params, meta.config))
}

/// Convenience for tests and probes: snapshot the parameters as plain
/// `(name, shape, data)` triples that can cross thread boundaries.
pub fn plain_triples<T: crate::tensor::Scalar>(
    named: &[(String, Tensor<T>)],
) -> Vec<(String, Vec<usize>, Vec<T>)> {
    named
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cell, DataTable, Role};
    use crate::embedding::AttributeSchema;
    use crate::masking::{build_task_masks, MaskConfig};
    use crate::model::{forward, npt_loss, tradeoff_lambda};
    use crate::Mode;
    use tempfile::tempdir;

    fn small_table() -> DataTable {
        let schema = AttributeSchema::from_json(
            r#"{"columns": [
                {"name": "x1", "kind": "continuous"},
                {"name": "x2", "kind": "continuous"},
                {"name": "y", "kind": "continuous", "target": true}
            ]}"#,
        )
        .unwrap();
        let mut rows = Vec::new();
        for i in 0..8 {
            let x1 = i as f64 * 0.3 - 1.0;
            let x2 = (i as f64).sin();
            rows.push(vec![Cell::Num(x1), Cell::Num(x2), Cell::Num(x1 + x2)]);
        }
        let mut table = DataTable::new(schema, rows).unwrap();
        let roles: Vec<Role> = (0..8)
            .map(|i| if i < 6 { Role::Train } else { Role::Test })
            .collect();
        table.set_roles(roles).unwrap();
        table
    }

    fn small_model() -> (NptParams<f32>, RunConfig, DataTable) {
        let table = small_table();
        let fitted = crate::embedding::FittedSchema::fit(&table).unwrap();
        let config: RunConfig = serde_json::from_str(
            r#"{"layers": 2, "heads": 1, "e": 4, "steps": 10, "seed": 7}"#,
        )
        .unwrap();
        config.validate(table.d()).unwrap();
        let mut rng = DeterministicRng::new(7);
        let mut params = NptParams::init(fitted, &config, &mut rng).unwrap();
        params.step = 42;
        (params, config, table)
    }

    fn eval_loss(params: &NptParams<f32>, config: &RunConfig, table: &DataTable) -> f32 {
        let fitted = params.embed.fitted.clone();
        let mut rng = DeterministicRng::new(33);
        let (x, mask) =
            build_task_masks(table, &fitted, &MaskConfig::eval(config.mask_mode), &mut rng)
                .unwrap();
        let mut drop_rng = DeterministicRng::new(34);
        let (z, _) = forward(&x, &mask, params, Mode::Eval, &mut drop_rng, false).unwrap();
        // Score the deterministically masked test targets.
        let mut m = mask.clone();
        for row in table.rows_with_role(Role::Test) {
            m.set_loss(row, 2, true);
        }
        let lambda = tradeoff_lambda(0, 10, config.lambda);
        npt_loss(&z, table, &m, lambda, &fitted)
            .unwrap()
            .item()
            .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempdir().unwrap();
        let (params, config, _) = small_model();
        let p1 = dir.path().join("a.nptc");
        let p2 = dir.path().join("b.nptc");
        save_checkpoint(&params, &config, &p1).unwrap();
        let (loaded, loaded_config) = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.step, 42);
        save_checkpoint(&loaded, &loaded_config, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "round-tripped checkpoint differs");
    }

    #[test]
    fn loaded_model_evaluates_bit_identically() {
        let dir = tempdir().unwrap();
        let (params, config, table) = small_model();
        let before = eval_loss(&params, &config, &table);
        let path = dir.path().join("m.nptc");
        save_checkpoint(&params, &config, &path).unwrap();
        let (loaded, loaded_config) = load_checkpoint(&path).unwrap();
        let after = eval_loss(&loaded, &loaded_config, &table);
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn truncated_files_error_with_an_offset() {
        let dir = tempdir().unwrap();
        let (params, config, _) = small_model();
        let path = dir.path().join("full.nptc");
        save_checkpoint(&params, &config, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let short = dir.path().join("short.nptc");
            std::fs::write(&short, &bytes[..cut]).unwrap();
            let err = load_checkpoint(&short).err().unwrap().to_string();
            assert!(
                err.contains("byte") || err.contains("truncated"),
                "cut at {cut}: {err}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempdir().unwrap();
        let (params, config, _) = small_model();
        let path = dir.path().join("m.nptc");
        save_checkpoint(&params, &config, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        std::fs::write(&path, &wrong).unwrap();
        let err = load_checkpoint(&path).err().unwrap().to_string();
        assert!(err.contains("bad magic"), "{err}");

        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).err().unwrap().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempdir().unwrap();
        let (params, config, _) = small_model();
        let path = dir.path().join("m.nptc");
        save_checkpoint(&params, &config, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(b"junk");
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).err().unwrap().to_string();
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn non_finite_parameters_refuse_to_save() {
        let dir = tempdir().unwrap();
        let (mut params, config, _) = small_model();
        let shape = params.embed.h_index.shape().to_vec();
        let mut data = params.embed.h_index.data().to_vec();
        data[0] = f32::NAN;
        params.embed.h_index = Tensor::param(&shape, data).unwrap();
        let err = save_checkpoint(&params, &config, &dir.path().join("x.nptc")).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }
}
