//! Training state ⇄ tensor container.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Nets, TrainConfig, TrainState};
use crate::container::Container;
use crate::data::EpochOrder;
use crate::error::{Error, Result};
use crate::losses::{GanLoss, LossWeights, SkeGrad};
use crate::models::{ModelSpec, Network};
use crate::tensor::{AdamConfig, AdamState, Element};

const NET_LABELS: [&str; 4] = ["g_x", "g_y", "d_x", "d_y"];
const NO_LIMIT: u64 = u64::MAX;

/// 32-byte seed, u64 stream, u128 word position.
const RNG_BLOB_LEN: usize = 32 + 8 + 16;

fn rng_blob(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn rng_from_blob(blob: &[u8]) -> Result<ChaCha8Rng> {
    if blob.len() != RNG_BLOB_LEN {
        return Err(Error::MalformedContainer(format!(
            "RNG state is {} bytes, expected {RNG_BLOB_LEN}",
            blob.len()
        )));
    }
    let mut rng = ChaCha8Rng::from_seed(blob[..32].try_into().expect("32 bytes"));
    rng.set_stream(u64::from_le_bytes(blob[32..40].try_into().expect("8 bytes")));
    rng.set_word_pos(u128::from_le_bytes(blob[40..].try_into().expect("16 bytes")));
    Ok(rng)
}

fn push_config(c: &mut Container, cfg: &TrainConfig) -> Result<()> {
    let s = &cfg.spec;
    let ints: [(&str, u64); 13] = [
        ("epochs", cfg.epochs),
        ("batch_size", cfg.batch_size as u64),
        ("image_size", s.image_size as u64),
        ("base_width", s.base_width as u64),
        ("residual_blocks", s.residual_blocks as u64),
        ("generator_in_channels", s.generator_in_channels as u64),
        ("paper_scale", s.paper_scale as u64),
        ("seed", cfg.seed),
        ("sgce_enabled", cfg.sgce_enabled as u64),
        ("checkpoint_every", cfg.checkpoint_every),
        ("max_steps", cfg.max_steps.unwrap_or(NO_LIMIT)),
        ("gan_loss", (cfg.gan_loss == GanLoss::Minimax) as u64),
        ("ske_grad", (cfg.ske_grad == SkeGrad::None) as u64),
    ];
    for (k, v) in ints {
        c.push_u64(format!("config/{k}"), vec![v])?;
    }
    let floats: [(&str, f64); 7] = [
        ("learning_rate", cfg.adam.learning_rate),
        ("beta1", cfg.adam.beta1),
        ("beta2", cfg.adam.beta2),
        ("adam_eps", cfg.adam.eps),
        ("lambda_cyc", cfg.weights.cyc),
        ("lambda_ske", cfg.weights.ske),
        ("threshold", cfg.threshold),
    ];
    for (k, v) in floats {
        c.push_f64(format!("config/{k}"), vec![v])?;
    }
    Ok(())
}

fn read_config(c: &Container) -> Result<TrainConfig> {
    let int = |k: &str| c.u64_scalar(&format!("config/{k}"));
    let float = |k: &str| c.f64_scalar(&format!("config/{k}"));
    let flag = |k: &str| -> Result<bool> {
        match int(k)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::MalformedContainer(format!("config/{k} = {v} is not a flag"))),
        }
    };
    let max_steps = int("max_steps")?;
    let cfg = TrainConfig {
        epochs: int("epochs")?,
        batch_size: int("batch_size")? as usize,
        adam: AdamConfig {
            learning_rate: float("learning_rate")?,
            beta1: float("beta1")?,
            beta2: float("beta2")?,
            eps: float("adam_eps")?,
        },
        weights: LossWeights {
            cyc: float("lambda_cyc")?,
            ske: float("lambda_ske")?,
        },
        spec: ModelSpec {
            image_size: int("image_size")? as usize,
            base_width: int("base_width")? as usize,
            residual_blocks: int("residual_blocks")? as usize,
            generator_in_channels: int("generator_in_channels")? as usize,
            paper_scale: flag("paper_scale")?,
        },
        seed: int("seed")?,
        threshold: float("threshold")?,
        sgce_enabled: flag("sgce_enabled")?,
        checkpoint_every: int("checkpoint_every")?,
        max_steps: (max_steps != NO_LIMIT).then_some(max_steps),
        gan_loss: if flag("gan_loss")? { GanLoss::Minimax } else { GanLoss::NonSaturating },
        ske_grad: if flag("ske_grad")? { SkeGrad::None } else { SkeGrad::MaskedIntensity },
    };
    cfg.validate()
        .map_err(|e| Error::MalformedContainer(format!("stored config is invalid: {e}")))?;
    Ok(cfg)
}

fn push_net<T: Element>(c: &mut Container, label: &str, net: &Network<T>) -> Result<()> {
    for p in net.params() {
        c.push_tensor(format!("{label}/{}", p.name), &p.value)?;
    }
    for (name, stats) in net.running_stats() {
        c.push_tensor(format!("{label}/{name}.running_mean"), &stats.mean)?;
        c.push_tensor(format!("{label}/{name}.running_var"), &stats.var)?;
    }
    Ok(())
}

fn load_net<T: Element>(c: &Container, label: &str, net: &mut Network<T>) -> Result<()> {
    for p in net.params_mut() {
        let t = c.tensor::<T>(&format!("{label}/{}", p.name))?;
        if t.shape() != p.value.shape() {
            return Err(Error::MalformedContainer(format!(
                "{label}/{} has shape {:?}, model expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    for (name, stats) in net.running_stats_mut() {
        let mean = c.tensor::<T>(&format!("{label}/{name}.running_mean"))?;
        let var = c.tensor::<T>(&format!("{label}/{name}.running_var"))?;
        if mean.shape() != stats.mean.shape() || var.shape() != stats.var.shape() {
            return Err(Error::MalformedContainer(format!("{label}/{name} running stats shape")));
        }
        stats.mean = mean;
        stats.var = var;
    }
    Ok(())
}

fn push_adam<T: Element>(c: &mut Container, label: &str, opt: &AdamState<T>) -> Result<()> {
    c.push_u64(format!("{label}/t"), vec![opt.step])?;
    for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        c.push_tensor(format!("{label}/m/{i}"), m)?;
        c.push_tensor(format!("{label}/v/{i}"), v)?;
    }
    Ok(())
}

fn load_adam<T: Element>(c: &Container, label: &str, opt: &mut AdamState<T>) -> Result<()> {
    opt.step = c.u64_scalar(&format!("{label}/t"))?;
    for i in 0..opt.m.len() {
        for (kind, slot) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
            let t = c.tensor::<T>(&format!("{label}/{kind}/{i}"))?;
            if t.shape() != slot.shape() {
                return Err(Error::MalformedContainer(format!("{label}/{kind}/{i} shape")));
            }
            *slot = t;
        }
    }
    Ok(())
}

fn to_u64s(v: &[usize]) -> Vec<u64> {
    v.iter().map(|&i| i as u64).collect()
}

pub fn state_to_container<T: Element>(state: &TrainState<T>) -> Result<Container> {
    let mut c = Container::new();
    push_config(&mut c, &state.cfg)?;
    let n = &state.nets;
    for (label, net) in NET_LABELS.iter().zip([&n.g_x, &n.g_y, &n.d_x, &n.d_y]) {
        push_net(&mut c, label, net)?;
    }
    push_adam(&mut c, "opt_g", &state.opt_g)?;
    push_adam(&mut c, "opt_d", &state.opt_d)?;
    c.push_u64("state/epoch", vec![state.epoch])?;
    c.push_u64("state/step_in_epoch", vec![state.step_in_epoch as u64])?;
    if let Some(order) = &state.order {
        c.push_u64("order/x", to_u64s(&order.x))?;
        c.push_u64("order/y", to_u64s(&order.y))?;
    }
    c.step = state.step;
    c.rng_state = rng_blob(&state.rng);
    Ok(c)
}

pub fn state_from_container<T: Element>(c: &Container) -> Result<TrainState<T>> {
    let cfg = read_config(c)?;
    let mut state = TrainState::new(cfg)?;
    let Nets { g_x, g_y, d_x, d_y } = &mut state.nets;
    for (label, net) in NET_LABELS.iter().zip([g_x, g_y, d_x, d_y]) {
        load_net(c, label, net)?;
    }
    load_adam(c, "opt_g", &mut state.opt_g)?;
    load_adam(c, "opt_d", &mut state.opt_d)?;
    state.epoch = c.u64_scalar("state/epoch")?;
    state.step_in_epoch = c.u64_scalar("state/step_in_epoch")? as usize;
    state.order = match (c.get("order/x"), c.get("order/y")) {
        (Some(_), Some(_)) => Some(EpochOrder {
            x: c.u64s("order/x")?.iter().map(|&i| i as usize).collect(),
            y: c.u64s("order/y")?.iter().map(|&i| i as usize).collect(),
        }),
        (None, None) => None,
        _ => return Err(Error::MalformedContainer("epoch order is incomplete".into())),
    };
    state.step = c.step;
    state.rng = rng_from_blob(&c.rng_state)?;
    Ok(state)
}

pub fn save_checkpoint<T: Element>(state: &TrainState<T>, path: &Path) -> Result<()> {
    state_to_container(state)?.save(path)
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<TrainState<T>> {
    state_from_container(&Container::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::tests::toy_data;
    use super::super::*;
    use super::*;

    #[test]
    fn roundtrip_after_training() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(4, 16, 1);
        let mut cfg = TrainConfig::desk(ModelSpec::desk(16, 4, 1), 2);
        cfg.batch_size = 2;
        cfg.epochs = 3;
        cfg.max_steps = Some(3);
        cfg.gan_loss = GanLoss::Minimax;
        let state = train::<f32>(cfg, &data, &TrainOutputs::default()).unwrap();
        assert!(state.order.is_some(), "stopped mid-epoch");
        let path = dir.path().join("a.sgce");
        save_checkpoint(&state, &path).unwrap();
        let loaded: TrainState<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, state);
        let again = dir.path().join("b.sgce");
        save_checkpoint(&loaded, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn rng_blob_roundtrip() {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(3);
        rng.next_u64();
        let mut back = rng_from_blob(&rng_blob(&rng)).unwrap();
        assert_eq!(back.next_u64(), rng.next_u64());
        assert!(rng_from_blob(&[0; 10]).is_err());
    }
}
