//! Dilated 1-D convolution over `[time, batch, channel]` buffers.
//!
//! A backward (causal) convolution computes `y[s] = Σ_j f(j)·x[s − d·j]`,
//! a forward (anticausal) one `y[s] = Σ_j f(j)·x[s + d·j]`. Taps that fall
//! outside `[0, T)` read zero, which is the same as padding `(k − 1)·d`
//! zeros on the left (backward) or right (forward): output length always
//! equals input length.
//!
//! Weights are stored as `[out_channels, in_channels / groups, k]`; tap `j`
//! of the kernel multiplies the input `d·j` steps away from the output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Looks into the past: taps at `s − d·j`.
    Backward,
    /// Looks into the future: taps at `s + d·j`.
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub dilation: usize,
    pub direction: Direction,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel size, dilation and groups must be positive: {self:?}"
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument(format!("empty channel count: {self:?}")));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::InvalidArgument(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_per_group(), self.kernel_size]
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_per_group() * self.kernel_size
    }

    /// Number of steps one layer reaches beyond the current position.
    pub fn reach(&self) -> usize {
        (self.kernel_size - 1) * self.dilation
    }

    /// Input position read by tap `j` for output position `t`, if in range.
    #[inline]
    pub fn source(&self, t: usize, j: usize, len: usize) -> Option<usize> {
        let offset = self.dilation * j;
        match self.direction {
            Direction::Backward => t.checked_sub(offset),
            Direction::Forward => {
                let s = t + offset;
                (s < len).then_some(s)
            }
        }
    }
}

/// Receptive field of `layers` stacked layers with dilation `2^(i−1)`.
pub fn receptive_field(kernel_size: usize, layers: u32) -> usize {
    1 + (kernel_size - 1) * ((1usize << layers) - 1)
}

/// Reorders `[out, in_g, k]` weights into `[k, out, in_g]` so the inner
/// product over input channels runs over contiguous memory.
pub(crate) fn pack_weights(spec: &ConvSpec, w: &[f64]) -> Vec<f64> {
    let (cout, cin_g, k) = (spec.out_channels, spec.in_per_group(), spec.kernel_size);
    let mut packed = vec![0.0; w.len()];
    for o in 0..cout {
        for c in 0..cin_g {
            for j in 0..k {
                packed[(j * cout + o) * cin_g + c] = w[(o * cin_g + c) * k + j];
            }
        }
    }
    packed
}

fn unpack_weights(spec: &ConvSpec, packed: &[f64]) -> Vec<f64> {
    let (cout, cin_g, k) = (spec.out_channels, spec.in_per_group(), spec.kernel_size);
    let mut w = vec![0.0; packed.len()];
    for o in 0..cout {
        for c in 0..cin_g {
            for j in 0..k {
                w[(o * cin_g + c) * k + j] = packed[(j * cout + o) * cin_g + c];
            }
        }
    }
    w
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Computes every batch row of output position `t` into `out`
/// (`batch × out_channels`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_position(
    spec: &ConvSpec,
    packed: &[f64],
    bias: &[f64],
    x: &[f64],
    len: usize,
    batch: usize,
    t: usize,
    out: &mut [f64],
) {
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    for b in 0..batch {
        out[b * cout..(b + 1) * cout].copy_from_slice(bias);
    }
    for j in 0..spec.kernel_size {
        let Some(src) = spec.source(t, j, len) else {
            continue;
        };
        let taps = &packed[j * cout * cin_g..(j + 1) * cout * cin_g];
        for b in 0..batch {
            let xrow = &x[(src * batch + b) * cin..(src * batch + b + 1) * cin];
            let orow = &mut out[b * cout..(b + 1) * cout];
            for (o, acc) in orow.iter_mut().enumerate() {
                let g = o / cout_g;
                *acc += dot(&taps[o * cin_g..(o + 1) * cin_g], &xrow[g * cin_g..(g + 1) * cin_g]);
            }
        }
    }
}

pub(crate) fn conv_forward(
    spec: &ConvSpec,
    w: &[f64],
    bias: &[f64],
    x: &[f64],
    len: usize,
    batch: usize,
) -> Vec<f64> {
    let packed = pack_weights(spec, w);
    let cout = spec.out_channels;
    let mut out = vec![0.0; len * batch * cout];
    for t in 0..len {
        conv_position(
            spec,
            &packed,
            bias,
            x,
            len,
            batch,
            t,
            &mut out[t * batch * cout..(t + 1) * batch * cout],
        );
    }
    out
}

/// Returns `(dx, dw, dbias)` for upstream gradient `dout`.
pub(crate) fn conv_backward(
    spec: &ConvSpec,
    w: &[f64],
    x: &[f64],
    dout: &[f64],
    len: usize,
    batch: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let packed = pack_weights(spec, w);
    let mut dx = vec![0.0; x.len()];
    let mut dpacked = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];

    for row in dout.chunks_exact(cout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    for t in 0..len {
        for j in 0..spec.kernel_size {
            let Some(src) = spec.source(t, j, len) else {
                continue;
            };
            let taps = &packed[j * cout * cin_g..(j + 1) * cout * cin_g];
            let dtaps = &mut dpacked[j * cout * cin_g..(j + 1) * cout * cin_g];
            for b in 0..batch {
                let grow = &dout[(t * batch + b) * cout..(t * batch + b + 1) * cout];
                let xrow = &x[(src * batch + b) * cin..(src * batch + b + 1) * cin];
                let dxrow = &mut dx[(src * batch + b) * cin..(src * batch + b + 1) * cin];
                for (o, &go) in grow.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    let g = o / cout_g;
                    let xs = &xrow[g * cin_g..(g + 1) * cin_g];
                    let ws = &taps[o * cin_g..(o + 1) * cin_g];
                    let dws = &mut dtaps[o * cin_g..(o + 1) * cin_g];
                    for c in 0..cin_g {
                        dws[c] += go * xs[c];
                    }
                    let dxs = &mut dxrow[g * cin_g..(g + 1) * cin_g];
                    for c in 0..cin_g {
                        dxs[c] += go * ws[c];
                    }
                }
            }
        }
    }
    (dx, unpack_weights(spec, &dpacked), db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation of the dilated convolution sum, one output at a time.
    fn naive(spec: &ConvSpec, w: &[f64], bias: &[f64], x: &[f64], len: usize, batch: usize) -> Vec<f64> {
        let (cin, cout, k) = (spec.in_channels, spec.out_channels, spec.kernel_size);
        let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
        let mut out = vec![0.0; len * batch * cout];
        for s in 0..len as isize {
            for b in 0..batch {
                for o in 0..cout {
                    let g = o / cout_g;
                    let mut acc = bias[o];
                    for j in 0..k as isize {
                        let d = spec.dilation as isize;
                        let pos = match spec.direction {
                            Direction::Forward => s + d * j,
                            Direction::Backward => s - d * j,
                        };
                        if pos < 0 || pos >= len as isize {
                            continue;
                        }
                        for c in 0..cin_g {
                            acc += w[(o * cin_g + c) * k + j as usize]
                                * x[(pos as usize * batch + b) * cin + g * cin_g + c];
                        }
                    }
                    out[(s as usize * batch + b) * cout + o] = acc;
                }
            }
        }
        out
    }

    fn spec(k: usize, d: usize, dir: Direction, cin: usize, cout: usize, groups: usize) -> ConvSpec {
        ConvSpec {
            kernel_size: k,
            dilation: d,
            direction: dir,
            in_channels: cin,
            out_channels: cout,
            groups,
        }
    }

    #[test]
    fn backward_direction_example() {
        let s = spec(2, 2, Direction::Backward, 1, 1, 1);
        let out = conv_forward(&s, &[1.0, 1.0], &[0.0], &[1.0, 2.0, 3.0, 4.0, 5.0], 5, 1);
        assert_eq!(out, vec![1.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn forward_direction_example() {
        let s = spec(2, 2, Direction::Forward, 1, 1, 1);
        let out = conv_forward(&s, &[1.0, 1.0], &[0.0], &[1.0, 2.0, 3.0, 4.0, 5.0], 5, 1);
        // position 3 reads x[3] and x[5]; x[5] is padding.
        assert_eq!(out, vec![4.0, 6.0, 8.0, 4.0, 5.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = [0.5, -1.0, 2.0, 7.0];
        for dir in [Direction::Backward, Direction::Forward] {
            for d in [1, 3, 8] {
                let s = spec(1, d, dir, 1, 1, 1);
                assert_eq!(conv_forward(&s, &[1.0], &[0.0], &x, 4, 1), x.to_vec());
            }
        }
    }

    #[test]
    fn matches_naive_with_groups_and_batch() {
        let mut seed = 17u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for dir in [Direction::Backward, Direction::Forward] {
            let s = spec(3, 2, dir, 4, 8, 2);
            let (len, batch) = (9, 3);
            let w: Vec<f64> = (0..s.weight_len()).map(|_| next()).collect();
            let bias: Vec<f64> = (0..8).map(|_| next()).collect();
            let x: Vec<f64> = (0..len * batch * 4).map(|_| next()).collect();
            let fast = conv_forward(&s, &w, &bias, &x, len, batch);
            let slow = naive(&s, &w, &bias, &x, len, batch);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn groups_must_divide_channels() {
        assert!(spec(3, 1, Direction::Forward, 6, 8, 4).validate().is_err());
        assert!(spec(3, 1, Direction::Forward, 8, 8, 4).validate().is_ok());
    }

    #[test]
    fn receptive_field_formula() {
        assert_eq!(receptive_field(9, 5), 249);
        assert_eq!(receptive_field(9, 6), 505);
        assert_eq!(receptive_field(3, 8), 511);
    }
}
