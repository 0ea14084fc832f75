//! Channels that carry the seer decoder's knowledge to the conventional
//! decoder: distillation (in [`crate::objectives::loss_kd`]), an L2 match
//! of hidden states, and adversarial matching through gradient reversal.
//!
//! Every channel reads seer quantities through [`Tape::stop_grad`], so the
//! teacher is trained by `L_s` alone.

use rand::Rng as _;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::model::{Fwd, Model};
use crate::rng::Streams;
use crate::tensor::{Scalar, Tensor};

pub const L2_MAP: &str = "l2.g";

/// Adds the `d × d` map `g`, initialized to the identity.
pub fn add_l2_params(model: &mut Model) -> Result<()> {
    let d = model.cfg.d_model;
    model.params.insert(L2_MAP, Tensor::identity(d)).map(drop)
}

/// `Σ ‖g(s_t) − s_s‖₂` over paired rows; `s_s` enters behind a stop-gradient.
/// The caller decides whether `s_t` still connects to the encoder.
pub fn loss_l2<T: Scalar>(tape: &mut Tape<T>, s_t: Var, s_s: Var, g: Var) -> Result<Var> {
    let mapped = tape.matmul(s_t, g)?;
    let teacher = tape.stop_grad(s_s);
    let diff = tape.sub(mapped, teacher)?;
    let norms = tape.row_norm(diff);
    Ok(tape.sum(norms))
}

/// Weight of the L2 term at `step`: zero while the decoders pretrain.
pub fn schedule_l2(step: u64, pretrain_steps: u64, alpha: f64) -> f64 {
    if step < pretrain_steps {
        0.0
    } else {
        alpha
    }
}

pub fn grad_reversal<T: Scalar>(tape: &mut Tape<T>, x: Var, scale: T) -> Var {
    tape.grad_reverse(x, scale)
}

/// Text CNN over hidden-state sequences: two width-3 convolutions with ReLU,
/// max over time, and a linear head giving one logit per sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Discriminator {
    pub channels: usize,
    pub width: usize,
}

impl Default for Discriminator {
    fn default() -> Self {
        Discriminator {
            channels: 64,
            width: 3,
        }
    }
}

impl Discriminator {
    pub fn add_params(&self, model: &mut Model, seed: u64) -> Result<()> {
        let d = model.cfg.d_model;
        let (c, w) = (self.channels, self.width);
        let mut rng = Streams::new(seed).stream("init/disc");
        let mut xavier = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::from_fn(&[rows, cols], |_| rng.random_range(-a..a) as f32)
        };
        let shapes = [
            ("disc.conv1.w", xavier(w * d, c)),
            ("disc.conv1.b", Tensor::zeros(&[c])),
            ("disc.conv2.w", xavier(w * c, c)),
            ("disc.conv2.b", Tensor::zeros(&[c])),
            ("disc.head.w", xavier(c, 1)),
            ("disc.head.b", Tensor::zeros(&[1])),
        ];
        for (name, t) in shapes {
            model.params.insert(name, t)?;
        }
        Ok(())
    }

    /// Logits `[batch × 1]` for sequences stored as `batch × len` rows, of
    /// which the first `lens[b]` are real.
    pub fn logits<T: Scalar>(
        &self,
        f: &mut Fwd<'_, T>,
        x: Var,
        len: usize,
        lens: &[usize],
    ) -> Result<Var> {
        let u = f.tape.unfold(x, len, self.width, lens)?;
        let h = f.affine(u, "disc.conv1.w", "disc.conv1.b")?;
        let h = f.tape.relu(h);
        let u = f.tape.unfold(h, len, self.width, lens)?;
        let h = f.affine(u, "disc.conv2.w", "disc.conv2.b")?;
        let h = f.tape.relu(h);
        let pooled = f.tape.segment_max(h, len, lens)?;
        f.affine(pooled, "disc.head.w", "disc.head.b")
    }
}

/// Result of the adversarial game for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Adversarial {
    /// Summed binary cross-entropy over both sequence sets.
    pub loss: Var,
    /// Fraction of the `2·batch` sequences the discriminator labels correctly.
    pub accuracy: f64,
}

/// Seer states are labelled real (1), student states fake (0). Student
/// states pass through gradient reversal, seer states through a
/// stop-gradient.
pub fn loss_adversarial<T: Scalar>(
    f: &mut Fwd<'_, T>,
    disc: &Discriminator,
    student: Var,
    seer: Var,
    len: usize,
    lens: &[usize],
) -> Result<Adversarial> {
    let s = grad_reversal(&mut f.tape, student, T::one());
    let t = f.tape.stop_grad(seer);
    let ls = disc.logits(f, s, len, lens)?;
    let lt = disc.logits(f, t, len, lens)?;
    let b = lens.len();
    let both = f.tape.concat_rows(&[lt, ls])?;
    let labels: Vec<T> = (0..2 * b)
        .map(|i| if i < b { T::one() } else { T::zero() })
        .collect();
    let loss = f.tape.bce_with_logits(both, &labels)?;
    let z = f.tape.value(both).data();
    let correct = z
        .iter()
        .zip(&labels)
        .filter(|(z, y)| (z.as_f64() > 0.0) == (y.as_f64() > 0.5))
        .count();
    Ok(Adversarial {
        loss,
        accuracy: correct as f64 / (2 * b) as f64,
    })
}
