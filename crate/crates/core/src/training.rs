//! Joint pretraining of both heads and LTC1 checkpoint persistence.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Model, Partition};
use crate::numerics::{argmax, sgd_step, OptState, ParamVector, Precision, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate factor applied every `lr_step_epochs`.
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    /// Weight of the rotation loss in the joint objective.
    pub aux_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 1.0,
            lr_step_epochs: 50,
            aux_weight: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Input("batch size must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Input(format!(
                "lr decay factor must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.lr_step_epochs == 0 {
            return Err(Error::Input("lr step interval must be >= 1 epoch".into()));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(Error::Input("aux weight must be >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_step_epochs) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub main_loss: f64,
    pub aux_loss: f64,
    pub train_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Joint SGD on `main + aux_weight * aux` over seeded per-epoch shuffles.
/// The final short batch is kept.
pub fn pretrain(model: Model, train: &ImageSet, cfg: &PretrainConfig) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut model = model;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut states = [
        OptState::new(model.partition(Partition::Shared), cfg.lr, cfg.momentum, cfg.weight_decay)?,
        OptState::new(model.partition(Partition::Main), cfg.lr, cfg.momentum, cfg.weight_decay)?,
        OptState::new(model.partition(Partition::Aux), cfg.lr, cfg.momentum, cfg.weight_decay)?,
    ];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let k = model.num_classes();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        states.iter_mut().for_each(|s| s.lr = lr);
        order.shuffle(&mut rng);
        let (mut main_sum, mut aux_sum, mut correct) = (0.0, 0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xs = Tensor::stack(
                &idx.iter()
                    .map(|&i| train.images[i].pixels.clone())
                    .collect::<Vec<_>>(),
            )?;
            let ys: Vec<usize> = idx.iter().map(|&i| train.images[i].label).collect();
            let main = model.main_loss_grad_batch(&xs, &ys)?;
            let mut trunk_grad = main.grad_s;
            let mut aux_head_grad = model.aux.zeros_like();
            let mut aux_loss = 0.0;
            if cfg.aux_weight > 0.0 {
                let aux = model.aux_loss_grad_batch(&xs)?;
                trunk_grad.axpy(cfg.aux_weight, &aux.grad_s)?;
                aux_head_grad.axpy(cfg.aux_weight, &aux.grad_head)?;
                aux_loss = aux.loss;
            }
            let total = main.loss + cfg.aux_weight * aux_loss;
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("pretraining loss at epoch {epoch} batch {b}"),
                });
            }
            for (row, &y) in main.probs.data().chunks(k).zip(&ys) {
                if argmax(row) == y {
                    correct += 1;
                }
            }
            main_sum += main.loss * idx.len() as f64;
            aux_sum += aux_loss * idx.len() as f64;

            let [s_state, m_state, a_state] = &mut states;
            sgd_step(&mut model.trunk, &trunk_grad, s_state)?;
            sgd_step(&mut model.main, &main.grad_head, m_state)?;
            sgd_step(&mut model.aux, &aux_head_grad, a_state)?;
        }
        let n = train.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            main_loss: main_sum / n,
            aux_loss: aux_sum / n,
            train_accuracy: correct as f64 / n,
            lr,
        });
    }
    Ok((model, history))
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LTC1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a model to LTC1 bytes with the given scalar precision.
pub fn encode_checkpoint(model: &Model, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let arch = model.arch().to_descriptor();
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    let params = model.named_params();
    out.extend_from_slice(&(params.tensor_count() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(precision.code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            match precision {
                Precision::Single => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::Double => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    save_checkpoint_with(model, path, Precision::Double)
}

pub fn save_checkpoint_with(model: &Model, path: &Path, precision: Precision) -> Result<()> {
    fs::write(path, encode_checkpoint(model, precision)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupt(format!("payload truncated in {}", what()))),
        }
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses LTC1 bytes back into a model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("checkpoint does not start with LTC1 magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let header = || "header".to_string();
    let version = r.u32(&header)?;
    if version > CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let arch_len = r.u32(&header)? as usize;
    let arch_text = std::str::from_utf8(r.take(arch_len, &|| "architecture descriptor".into())?)
        .map_err(|_| Error::Corrupt("architecture descriptor is not UTF-8".into()))?;
    let arch = ArchConfig::from_descriptor(arch_text)?;
    let count = r.u32(&header)? as usize;

    let mut parts = [ParamVector::new(), ParamVector::new(), ParamVector::new()];
    for i in 0..count {
        let idx = || format!("tensor #{i}");
        let name_len = {
            let b = r.take(2, &idx)?;
            u16::from_le_bytes([b[0], b[1]]) as usize
        };
        let name = std::str::from_utf8(r.take(name_len, &idx)?)
            .map_err(|_| Error::Corrupt(format!("tensor #{i} name is not UTF-8")))?
            .to_string();
        let named = || format!("tensor `{name}`");
        let meta = r.take(2, &named)?;
        let precision = Precision::from_code(meta[0])
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` has precision code {}", meta[0])))?;
        let rank = meta[1] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&named)? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * precision.scalar_bytes(), &named)?;
        let data: Vec<f64> = match precision {
            Precision::Single => raw
                .chunks(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect(),
            Precision::Double => raw
                .chunks(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect(),
        };
        let (prefix, rest) = name
            .split_once('.')
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` has no partition prefix")))?;
        let slot = match prefix {
            "trunk" => 0,
            "main" => 1,
            "aux" => 2,
            _ => return Err(Error::Corrupt(format!("tensor `{name}` has unknown partition"))),
        };
        parts[slot].insert(rest, Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    let [trunk, main, aux] = parts;
    Model::from_parts(arch, trunk, main, aux, 0)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    fn tiny() -> Model {
        Model::build(ArchConfig::conv_stack(1, 6, 2, (4, 4, 4)), 3).unwrap()
    }

    #[test]
    fn zero_epochs_is_identity() {
        let model = tiny();
        let data = synth_blobs(2, 2, &[1, 6, 6], 0.8, 1).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (out, hist) = pretrain(model.clone(), &data, &cfg).unwrap();
        assert_eq!(out, model);
        assert!(hist.epochs.is_empty());
    }

    #[test]
    fn schedule_is_step_decay() {
        let cfg = PretrainConfig {
            lr: 0.1,
            lr_decay: 0.9,
            lr_step_epochs: 50,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(49), 0.1);
        assert!((cfg.lr_at(50) - 0.09).abs() < 1e-15);
        assert!((cfg.lr_at(137) - 0.1 * 0.81).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        let data = synth_blobs(2, 2, &[1, 6, 6], 0.8, 1).unwrap();
        for cfg in [
            PretrainConfig { batch_size: 0, ..Default::default() },
            PretrainConfig { lr_decay: 0.0, ..Default::default() },
            PretrainConfig { lr_decay: 1.5, ..Default::default() },
        ] {
            assert!(pretrain(tiny(), &data, &cfg).is_err());
        }
        let empty = data.head(0);
        assert!(pretrain(tiny(), &empty, &PretrainConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_header_layout() {
        let model = tiny();
        let bytes = encode_checkpoint(&model, Precision::Double);
        assert_eq!(&bytes[..4], b"LTC1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let arch_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(bytes[12 + arch_len..16 + arch_len].try_into().unwrap());
        assert_eq!(count as usize, model.named_params().tensor_count());
    }

    #[test]
    fn single_precision_round_trip_is_close() {
        let model = tiny();
        let back = decode_checkpoint(&encode_checkpoint(&model, Precision::Single)).unwrap();
        for (a, b) in model.named_params().flatten().iter().zip(back.named_params().flatten()) {
            assert!((a - b).abs() <= 1e-7 * a.abs().max(1.0));
        }
    }

    #[test]
    fn newer_version_is_rejected() {
        let mut bytes = encode_checkpoint(&tiny(), Precision::Double);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Version { found: 2, supported: 1 })
        ));
    }
}
