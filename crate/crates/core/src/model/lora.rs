//! Low-rank adapters on frozen linear layers.

use crate::error::ModelError;
use crate::rng::StreamRng;
use crate::tensor::{Element, Tape, Tensor, Var};

use super::{ForwardCtx, Mode};

/// Trainable low-rank pair: the update is `(alpha / rank) · B · A`.
#[derive(Clone, Debug)]
pub struct LoraAdapter<T> {
    /// `[rank × d_in]`
    pub a: Tensor<T>,
    /// `[d_out × rank]`
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl<T: Element> LoraAdapter<T> {
    /// `A ~ N(0, init_std²)`, `B = 0`.
    pub fn init(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        dropout_p: f64,
        init_std: f64,
        rng: &mut StreamRng,
    ) -> Result<Self, ModelError> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(ModelError::Config(format!(
                "rank {rank} must be in 1..={}",
                d_in.min(d_out)
            )));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(ModelError::Config(format!("dropout {dropout_p} not in [0, 1)")));
        }
        let a = Tensor::from_fn(&[rank, d_in], |_| T::of(rng.normal() * init_std));
        Ok(Self {
            a,
            b: Tensor::zeros(&[d_out, rank]),
            rank,
            alpha,
            dropout_p,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// Dense `(alpha / rank) · B · A`, shaped like the base weight.
    pub fn delta(&self) -> Tensor<T> {
        let mut d = self.b.matmul(&self.a).expect("adapter shapes");
        let s = T::of(self.scale());
        d.data_mut().iter_mut().for_each(|v| *v *= s);
        d
    }
}

/// Linear layer `y = x·Wᵀ + b` whose base weights can be frozen, with an
/// optional adapter.
#[derive(Clone, Debug)]
pub struct FrozenLinear<T> {
    /// `[d_out × d_in]`
    pub weight: Tensor<T>,
    /// `[d_out]`
    pub bias: Tensor<T>,
    pub adapter: Option<LoraAdapter<T>>,
}

impl<T: Element> FrozenLinear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self, ModelError> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.numel() != ws[0] {
            return Err(ModelError::Config(format!(
                "linear weight {:?} with bias {:?}",
                ws,
                bias.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            adapter: None,
        })
    }

    pub fn init(d_in: usize, d_out: usize, rng: &mut StreamRng) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[d_out, d_in], |_| T::of(rng.normal() * std)),
            bias: Tensor::zeros(&[d_out]),
            adapter: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Base output plus `(alpha/r)·B·A·dropout(x)`; dropout only in train mode.
    pub(crate) fn forward(
        &self,
        name: &str,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var, ModelError> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.d_in() {
            return Err(ModelError::Tensor(crate::error::TensorError::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: self.weight.shape().to_vec(),
            }));
        }
        let w = ctx.bind(tape, format!("base/{name}/weight"), &self.weight, ctx.train_base);
        let b = ctx.bind(tape, format!("base/{name}/bias"), &self.bias, ctx.train_base);
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        let y = tape.add_bias(y, b)?;
        let Some(adapter) = &self.adapter else {
            return Ok(y);
        };
        let a = ctx.bind(tape, format!("lora/{name}/A"), &adapter.a, ctx.train_lora);
        let bm = ctx.bind(tape, format!("lora/{name}/B"), &adapter.b, ctx.train_lora);
        let xd = match (ctx.mode, ctx.dropout.as_deref_mut()) {
            (Mode::Train, Some(rng)) => tape.dropout(x, adapter.dropout_p, rng)?,
            _ => x,
        };
        let at = tape.transpose(a)?;
        let h = tape.matmul(xd, at)?;
        let bt = tape.transpose(bm)?;
        let u = tape.matmul(h, bt)?;
        let u = tape.scale(u, adapter.scale())?;
        Ok(tape.add(y, u)?)
    }

    /// Folds the adapter into the base weight and removes it.
    pub fn merge(&mut self) -> Result<(), ModelError> {
        let adapter = self.adapter.take().ok_or(ModelError::NoAdapters)?;
        let delta = adapter.delta();
        for (w, d) in self.weight.data_mut().iter_mut().zip(delta.data()) {
            *w += *d;
        }
        Ok(())
    }
}
