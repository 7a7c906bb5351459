//! Temporal block: dilated conv → GELU → dropout → weight-normed dense,
//! split into a residual hidden state and a skip output.

use rand::Rng;

use crate::autodiff::{ConvSpec, Direction, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Parameter handles of one temporal block.
#[derive(Debug, Clone)]
pub struct TemporalBlockParams {
    pub layer_index: usize,
    pub conv: ConvSpec,
    pub conv_v: ParamId,
    pub conv_g: ParamId,
    pub conv_b: ParamId,
    /// Stored `[2·d_h, 4·d_h]`, one row per output unit.
    pub dense_v: ParamId,
    pub dense_g: ParamId,
    pub dense_b: ParamId,
    pub dropout: f64,
}

impl TemporalBlockParams {
    pub fn hidden(&self) -> usize {
        self.conv.in_channels
    }

    /// Registers a block's tensors under `prefix`. Dilation is `2^(i−1)`
    /// for layer index `i`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        layer_index: usize,
        hidden: usize,
        kernel_size: usize,
        direction: Direction,
        groups: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if layer_index == 0 {
            return Err(Error::InvalidArgument("layer index starts at 1".into()));
        }
        let conv = ConvSpec {
            kernel_size,
            dilation: 1 << (layer_index - 1),
            direction,
            in_channels: hidden,
            out_channels: 4 * hidden,
            groups,
        };
        conv.validate()?;
        let (conv_v, conv_g) = super::init::weight_normed(
            store,
            &format!("{prefix}.conv"),
            &conv.weight_shape(),
            rng,
        );
        let conv_b = store.add(format!("{prefix}.conv.b"), crate::Tensor::zeros(&[4 * hidden]));
        let (dense_v, dense_g) =
            super::init::weight_normed(store, &format!("{prefix}.dense"), &[2 * hidden, 4 * hidden], rng);
        let dense_b = store.add(format!("{prefix}.dense.b"), crate::Tensor::zeros(&[2 * hidden]));
        Ok(TemporalBlockParams {
            layer_index,
            conv,
            conv_v,
            conv_g,
            conv_b,
            dense_v,
            dense_g,
            dense_b,
            dropout,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [self.conv_v, self.conv_g, self.conv_b, self.dense_v, self.dense_g, self.dense_b]
    }
}

/// Runs one block over `x [T × batch × d_h]`; returns `(h, o)`, both shaped
/// like `x`.
pub fn temporal_block_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    block: &TemporalBlockParams,
    x: Var,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let hidden = block.hidden();
    if g.shape(x).len() != 3 || g.shape(x)[2] != hidden {
        return Err(Error::shape(
            "temporal_block",
            format!("input {:?} but block width {hidden}", g.shape(x)),
        ));
    }
    let v = g.param(store, block.conv_v);
    let gain = g.param(store, block.conv_g);
    let w = g.weight_norm(v, gain)?;
    let b = g.param(store, block.conv_b);
    let c = g.dilated_conv(x, w, b, block.conv)?;
    let a = g.gelu(c);
    let a = g.dropout(a, block.dropout, training, rng)?;

    let dv = g.param(store, block.dense_v);
    let dg = g.param(store, block.dense_g);
    let dw = g.weight_norm(dv, dg)?;
    let dw = g.transpose(dw)?;
    let db = g.param(store, block.dense_b);
    let z = g.affine(a, dw, db)?;

    let h_raw = g.slice_channels(z, 0, hidden)?;
    let o = g.slice_channels(z, hidden, hidden)?;
    let h = g.add(x, h_raw)?;
    Ok((h, o))
}

/// Threads the hidden state through `blocks` and returns the sum of their
/// skip outputs.
pub fn stack_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    blocks: &[TemporalBlockParams],
    x: Var,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("empty temporal stack".into()));
    }
    let mut h = x;
    let mut skip: Option<Var> = None;
    for (i, block) in blocks.iter().enumerate() {
        if block.layer_index != i + 1 {
            return Err(Error::InvalidArgument(format!(
                "block {i} has layer index {}",
                block.layer_index
            )));
        }
        let (next, o) = temporal_block_forward(g, store, block, h, training, rng)?;
        skip = Some(match skip {
            Some(s) => g.add(s, o)?,
            None => o,
        });
        h = next;
    }
    Ok(skip.expect("non-empty stack"))
}
