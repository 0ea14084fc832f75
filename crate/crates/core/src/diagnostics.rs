//! Finite-difference checks of every differentiable kernel and of one full
//! training objective, run in `f64`.

use std::sync::Arc;

use rand::Rng as _;

use crate::autograd::{AttnShape, Tape, Var};
use crate::config::RunConfig;
use crate::data::Batch;
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_params, GradCheckConfig, GradCheckReport};
use crate::kernels::AttnMask;
use crate::model::{Fwd, Model, ModelConfig, SeerParts};
use crate::objectives::Mechanism;
use crate::rng::Streams;
use crate::tensor::Tensor;
use crate::train::{add_mechanism_params, forward_losses, LossConfig};

type Program = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Values in `±[0.2, 1.2]`, away from the kinks of relu and max.
fn away_from_zero(shape: &[usize], rng: &mut crate::rng::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.2);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces any output to a scalar through fixed random weights so every
/// output coordinate carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Streams::new(seed).stream("gradcheck/weights");
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn case(
    name: &'static str,
    inputs: Vec<(&'static str, Tensor<f64>)>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> (&'static str, Vec<(&'static str, Tensor<f64>)>, Program) {
    (
        name,
        inputs,
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = f(t, v)?;
            weighted_sum(t, y, name.len() as u64)
        }),
    )
}

fn kernel_cases() -> Vec<(&'static str, Vec<(&'static str, Tensor<f64>)>, Program)> {
    let mut rng = Streams::new(7).stream("gradcheck/inputs");
    let mut r = |shape: &[usize]| away_from_zero(shape, &mut rng);
    let causal = Arc::new(AttnMask::causal(3));
    let batched = Arc::new(AttnMask::batched_from_fn(2, 3, 4, |b, q, k| k > q + b + 1));
    let shape = AttnShape {
        batch: 2,
        q_len: 3,
        k_len: 4,
        heads: 2,
    };
    vec![
        case("matmul", vec![("a", r(&[3, 4])), ("b", r(&[4, 2]))], |t, v| t.matmul(v[0], v[1])),
        case("matmul_nt", vec![("a", r(&[3, 4])), ("b", r(&[5, 4]))], |t, v| {
            t.matmul_nt(v[0], v[1])
        }),
        case("add", vec![("a", r(&[2, 3])), ("b", r(&[2, 3]))], |t, v| t.add(v[0], v[1])),
        case("sub", vec![("a", r(&[2, 3])), ("b", r(&[2, 3]))], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![("a", r(&[2, 3])), ("b", r(&[2, 3]))], |t, v| t.mul(v[0], v[1])),
        case("add_row", vec![("x", r(&[3, 4])), ("b", r(&[4]))], |t, v| t.add_row(v[0], v[1])),
        case("scale", vec![("x", r(&[2, 3]))], |t, v| Ok(t.scale(v[0], -1.7))),
        case("relu", vec![("x", r(&[3, 4]))], |t, v| Ok(t.relu(v[0]))),
        case("dropout", vec![("x", r(&[2, 3]))], |t, v| {
            t.dropout_mask(v[0], vec![2.0, 0.0, 2.0, 2.0, 0.0, 2.0])
        }),
        case("softmax", vec![("x", r(&[3, 5]))], |t, v| Ok(t.softmax(v[0]))),
        case("masked_softmax", vec![("x", r(&[3, 3]))], move |t, v| {
            t.masked_softmax(v[0], Some(causal.clone()))
        }),
        case(
            "layer_norm",
            vec![("x", r(&[3, 5])), ("g", r(&[5])), ("b", r(&[5]))],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6),
        ),
        case("gather_rows", vec![("x", r(&[4, 3]))], |t, v| t.gather_rows(v[0], &[3, 0, 3, 1])),
        case("embedding", vec![("table", r(&[5, 3]))], |t, v| t.embedding(v[0], &[4, 4, 0, 2])),
        case("reverse_rows", vec![("x", r(&[3, 2]))], |t, v| Ok(t.reverse_rows(v[0]))),
        case("concat_rows", vec![("a", r(&[2, 3])), ("b", r(&[1, 3]))], |t, v| {
            t.concat_rows(&[v[0], v[1]])
        }),
        case("sum", vec![("x", r(&[2, 3]))], |t, v| Ok(t.sum(v[0]))),
        case(
            "soft_cross_entropy",
            vec![("logits", r(&[3, 4])), ("target", r(&[3, 4]))],
            |t, v| t.soft_cross_entropy(v[0], v[1]),
        ),
        case("row_norm", vec![("x", r(&[3, 4]))], |t, v| Ok(t.row_norm(v[0]))),
        case("bce_with_logits", vec![("z", r(&[4, 1]))], |t, v| {
            t.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0])
        }),
        case("grad_reverse", vec![("x", r(&[2, 3]))], |t, v| Ok(t.grad_reverse(v[0], 0.7))),
        case(
            "attention",
            vec![("q", r(&[6, 4])), ("k", r(&[8, 4])), ("v", r(&[8, 4]))],
            move |t, v| t.attention(v[0], v[1], v[2], shape, batched.clone()),
        ),
        case("unfold", vec![("x", r(&[8, 2]))], |t, v| t.unfold(v[0], 4, 3, &[4, 2])),
        case("segment_max", vec![("x", r(&[8, 3]))], |t, v| t.segment_max(v[0], 4, &[3, 4])),
    ]
}

/// Every kernel with every input checked coordinate by coordinate.
pub fn kernel_grad_checks(h: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let cfg = GradCheckConfig {
        h,
        samples_per_tensor: None,
        seed: 0,
    };
    kernel_cases()
        .into_iter()
        .map(|(name, inputs, program)| {
            let refs: Vec<(&str, Tensor<f64>)> = inputs;
            Ok((name, grad_check(|t, v| program(t, v), &refs, &cfg)?))
        })
        .collect()
}

/// A small model and batch for the composite check.
pub fn tiny_setup(mechanism: Mechanism) -> Result<(RunConfig, Model<f64>, Batch)> {
    let mut cfg = RunConfig::default();
    cfg.training.mechanism = mechanism;
    cfg.training.pretrain_steps = 0;
    cfg.training.disc_channels = 4;
    let mc = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 12,
        dropout: 0.0,
        max_len: 16,
        src_vocab: 11,
        tgt_vocab: 12,
        seer: Some(SeerParts::FULL),
    };
    let mut model = Model::new(mc, 3)?;
    add_mechanism_params(&mut model, &cfg)?;
    let batch = Batch::from_pairs(&[
        (&[4, 5, 6, 7][..], &[8, 9, 10][..]),
        (&[6, 10, 4][..], &[11, 4, 5, 9][..]),
    ]);
    Ok((cfg, model.cast(), batch))
}

/// Gradient of the full normalized objective (encoder, both decoders and
/// the mechanism's term) against central differences.
pub fn composite_grad_check(mechanism: Mechanism, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (run, model, batch) = tiny_setup(mechanism)?;
    let lc = LossConfig::from_run(&run);
    let mcfg = model.cfg.clone();
    grad_check_params(
        &model.params,
        |tape, store| {
            let m = Model {
                cfg: mcfg.clone(),
                params: store.clone(),
            };
            let mut f = Fwd::new(&m);
            std::mem::swap(&mut f.tape, tape);
            let out = forward_losses(&mut f, &batch, &lc, 0);
            std::mem::swap(&mut f.tape, tape);
            Ok(out?.total)
        },
        |_| true,
        cfg,
    )
}
