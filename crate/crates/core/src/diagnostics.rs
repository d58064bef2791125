//! Finite-difference checks over every primitive, each loss and a tiny
//! encoder, as run by the `gradcheck` command.

use rand::Rng;
use slicer_autodiff::{check_gradients, suite, Tape, Tensor, Var};

use crate::error::Result;
use crate::losses::{
    cluster_contrastive_loss, instance_info_nce, symmetric_instance_loss, total_loss,
    ContrastiveConfig,
};
use crate::model::{EncoderConfig, EncoderParams};
use crate::seed;

/// Central difference half-width used throughout.
pub const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("consistent")
}

fn loss_row(
    name: &str,
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckRow> {
    let r = check_gradients(
        |t, v| {
            f(t, v).map_err(|e| slicer_autodiff::AutodiffError::InvalidArgument {
                op: "loss",
                detail: e.to_string(),
            })
        },
        inputs,
        STEP,
    )?;
    Ok(CheckRow {
        name: name.to_string(),
        max_rel_error: r.max_rel_error,
    })
}

/// Tiny encoder on a 16x16 input, so every layer is exercised in seconds.
pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        n_mels: 16,
        n_frames: 16,
        channels: [2, 3],
        conv_stride: 2,
        hidden: 5,
        embed_dim: 4,
    }
}

/// Runs the whole suite with inputs drawn from `root_seed`; `points` random
/// draws per primitive.
pub fn run_suite(root_seed: u64, points: usize) -> Result<Vec<CheckRow>> {
    let mut rng = seed::subsystem_rng(root_seed, "gradcheck");
    let mut rows: Vec<CheckRow> = {
        let mut sample = || rng.gen_range(-1.0..1.0);
        suite::run_primitive_checks(&mut sample, points, STEP)?
            .into_iter()
            .map(|(name, e)| CheckRow {
                name: format!("primitive/{name}"),
                max_rel_error: e,
            })
            .collect()
    };

    let cfg = ContrastiveConfig::default();
    let batch = [4, 6];
    let four: Vec<Tensor> = (0..4).map(|_| random(&batch, &mut rng)).collect();
    rows.push(loss_row("loss/instance", &four[..2], |t, v| {
        instance_info_nce(t, v[0], v[1], &cfg)
    })?);
    rows.push(loss_row("loss/symmetric", &four, |t, v| {
        symmetric_instance_loss(t, v[0], v[1], v[2], v[3], &cfg)
    })?);
    rows.push(loss_row("loss/cluster", &four[..2], |t, v| {
        cluster_contrastive_loss(t, v[0], v[1], &cfg)
    })?);
    let with_entropy = ContrastiveConfig {
        entropy_weight: 0.5,
        ..cfg
    };
    rows.push(loss_row("loss/total", &four, |t, v| {
        Ok(total_loss(t, v[0], v[1], v[2], v[3], &with_entropy)?.total)
    })?);

    let enc = EncoderParams::init(tiny_encoder_config(), &mut rng)?;
    let x = random(&[2, 1, 16, 16], &mut rng);
    let w = random(&[2, 4], &mut rng);
    rows.push(loss_row("encoder/forward", &enc.tensors, |t, v| {
        let bound = crate::model::BoundEncoder {
            config: enc.config,
            vars: v.to_vec(),
        };
        let xv = t.constant(x.clone());
        let y = bound.forward(t, xv)?;
        let wv = t.constant(w.clone());
        let yw = t.mul(y, wv)?;
        Ok(t.sum(yw)?)
    })?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_is_tight() {
        let rows = run_suite(0, 1).unwrap();
        assert!(rows.iter().any(|r| r.name == "loss/total"));
        for r in &rows {
            assert!(r.max_rel_error < 1e-4, "{} {}", r.name, r.max_rel_error);
        }
    }
}
