//! Attention-GRU network mapping feature windows to factor-model coefficients.
//!
//! A one-layer GRU consumes a `d_in x T` feature window (batched as `T`
//! matrices of shape `S x d_in`), a Bahdanau-style location attention pools
//! the hidden states `y_1..y_T` into a context vector, and a bounded linear
//! head emits one coefficient per output channel. Disabling attention feeds
//! `y_T` straight to the head, which is the plain GRU ablation; the
//! recurrence itself is unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Floor added to softplus for positive channels so scale coefficients stay
/// bounded away from zero.
pub const POSITIVE_FLOOR: f64 = 1e-4;

/// Symmetric clip for unbounded channels, in normalized units.
pub const UNBOUNDED_CLIP: f64 = 5.0;

/// Output-channel transform applied to the linear head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ChannelKind {
    /// Identity clipped to `[-UNBOUNDED_CLIP, UNBOUNDED_CLIP]`.
    Unbounded,
    /// `softplus(x) + POSITIVE_FLOOR`.
    Positive,
    /// `lo + (hi - lo) * sigmoid(x)`.
    Box { lo: f64, hi: f64 },
}

/// Ordered channel layout of the network head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub channels: Vec<ChannelKind>,
}

impl HeadSpec {
    /// Market head: `(alpha, beta)` with `beta > 0`.
    pub fn market() -> Self {
        HeadSpec {
            channels: vec![ChannelKind::Unbounded, ChannelKind::Positive],
        }
    }

    /// Stock head: `(alpha, beta, gamma)` with `gamma > 0`.
    pub fn stock() -> Self {
        HeadSpec {
            channels: vec![
                ChannelKind::Unbounded,
                ChannelKind::Unbounded,
                ChannelKind::Positive,
            ],
        }
    }

    pub fn d_out(&self) -> usize {
        self.channels.len()
    }
}

/// All trainable tensors of one network. Weight matrices are stored
/// transposed relative to the usual convention (input-dim first) so batched
/// rows multiply directly: `x (S x d_in) * w (d_in x n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgruParams {
    pub d_in: usize,
    pub hidden: usize,
    pub head: HeadSpec,
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
    pub att_w: Tensor,
    pub att_u: Tensor,
    pub att_v: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Node ids of the registered parameter leaves, in canonical tensor order.
pub struct AgruNodes {
    pub ids: Vec<NodeId>,
}

/// Forward-pass handles into the tape.
pub struct AgruForward {
    /// Hidden states `y_1..y_T`, each `S x hidden`.
    pub states: Vec<NodeId>,
    /// Attention weights (`S x T`), present only when attention is enabled.
    pub attention: Option<NodeId>,
    /// Pooled context (`S x hidden`).
    pub context: NodeId,
    /// Head output after channel transforms (`S x d_out`).
    pub theta: NodeId,
}

impl AgruParams {
    /// Fresh network: weights uniform in `[-1/sqrt(hidden), 1/sqrt(hidden)]`,
    /// biases zero. Identical seeds produce bitwise-identical parameters.
    pub fn init(d_in: usize, hidden: usize, head: HeadSpec, seed: u64) -> Result<Self> {
        if d_in == 0 || hidden == 0 || head.channels.is_empty() {
            return Err(Error::Config(
                "network dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut w = |r: usize, c: usize| -> Result<Tensor> {
            let data = (0..r * c)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            Tensor::matrix(r, c, data)
        };
        let d_out = head.d_out();
        Ok(AgruParams {
            d_in,
            hidden,
            w_z: w(d_in, hidden)?,
            u_z: w(hidden, hidden)?,
            b_z: Tensor::zeros(vec![1, hidden])?,
            w_r: w(d_in, hidden)?,
            u_r: w(hidden, hidden)?,
            b_r: Tensor::zeros(vec![1, hidden])?,
            w_h: w(d_in, hidden)?,
            u_h: w(hidden, hidden)?,
            b_h: Tensor::zeros(vec![1, hidden])?,
            att_w: w(hidden, hidden)?,
            att_u: w(hidden, hidden)?,
            att_v: w(hidden, 1)?,
            w_out: w(hidden, d_out)?,
            b_out: Tensor::zeros(vec![1, d_out])?,
            head,
        })
    }

    /// Canonical (name, tensor) view used by snapshots and the optimizer.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_z", &self.w_z),
            ("u_z", &self.u_z),
            ("b_z", &self.b_z),
            ("w_r", &self.w_r),
            ("u_r", &self.u_r),
            ("b_r", &self.b_r),
            ("w_h", &self.w_h),
            ("u_h", &self.u_h),
            ("b_h", &self.b_h),
            ("att_w", &self.att_w),
            ("att_u", &self.att_u),
            ("att_v", &self.att_v),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
            &mut self.att_w,
            &mut self.att_u,
            &mut self.att_v,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Restores tensor values from a snapshot written by `tensors()` order.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let expect: Vec<&'static str> = self.tensors().iter().map(|(n, _)| *n).collect();
        if entries.len() != expect.len() {
            return Err(Error::Format(format!(
                "snapshot has {} tensors, network needs {}",
                entries.len(),
                expect.len()
            )));
        }
        for ((name, tensor), (have, slot)) in expect
            .iter()
            .zip(self.tensors_mut())
            .map(|(n, s)| (n, s))
            .zip(entries.iter())
            .map(|((n, s), (hn, ht))| ((n, ht), (hn, s)))
        {
            if *name != have.as_str() {
                return Err(Error::Format(format!(
                    "snapshot tensor '{have}' where '{name}' expected"
                )));
            }
            if tensor.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "snapshot tensor '{name}' has shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone();
        }
        Ok(())
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        self.tensors()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<AgruNodes> {
        let mut ids = Vec::with_capacity(14);
        for (_, t) in self.tensors() {
            ids.push(tape.leaf(t.clone())?);
        }
        Ok(AgruNodes { ids })
    }

    /// Unrolls the network over `xs` (one `S x d_in` node per time step).
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &AgruNodes,
        xs: &[NodeId],
        use_attention: bool,
    ) -> Result<AgruForward> {
        if xs.is_empty() {
            return Err(Error::Shape {
                op: "agru_forward",
                detail: "window length must be positive".into(),
            });
        }
        let [w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h, att_w, att_u, att_v, w_out, b_out] =
            <[NodeId; 14]>::try_from(nodes.ids.as_slice()).map_err(|_| Error::Shape {
                op: "agru_forward",
                detail: "expected 14 parameter nodes".into(),
            })?;
        let batch = tape.value(xs[0]).dims2().0;
        let mut h = tape.constant(Tensor::zeros(vec![batch, self.hidden])?)?;
        let mut states = Vec::with_capacity(xs.len());
        for &x in xs {
            let z = {
                let a = tape.matmul(x, w_z)?;
                let b = tape.matmul(h, u_z)?;
                let s = tape.add(a, b)?;
                let s = tape.add(s, b_z)?;
                tape.sigmoid(s)?
            };
            let r = {
                let a = tape.matmul(x, w_r)?;
                let b = tape.matmul(h, u_r)?;
                let s = tape.add(a, b)?;
                let s = tape.add(s, b_r)?;
                tape.sigmoid(s)?
            };
            let cand = {
                let a = tape.matmul(x, w_h)?;
                let rh = tape.mul(r, h)?;
                let b = tape.matmul(rh, u_h)?;
                let s = tape.add(a, b)?;
                let s = tape.add(s, b_h)?;
                tape.tanh(s)?
            };
            // h' = h + z (cand - h) = (1 - z) h + z cand
            let delta = tape.sub(cand, h)?;
            let upd = tape.mul(z, delta)?;
            h = tape.add(h, upd)?;
            states.push(h);
        }

        let (context, attention) = if use_attention {
            let (ctx, att) = attention_context(tape, &states, att_w, att_u, att_v)?;
            (ctx, Some(att))
        } else {
            (*states.last().expect("nonempty"), None)
        };

        let raw = {
            let m = tape.matmul(context, w_out)?;
            tape.add(m, b_out)?
        };
        let theta = self.apply_head(tape, raw)?;
        Ok(AgruForward {
            states,
            attention,
            context,
            theta,
        })
    }

    fn apply_head(&self, tape: &mut Tape, raw: NodeId) -> Result<NodeId> {
        let mut cols = Vec::with_capacity(self.head.channels.len());
        for (k, kind) in self.head.channels.iter().enumerate() {
            let ch = tape.slice_cols(raw, k, k + 1)?;
            let out = match *kind {
                ChannelKind::Unbounded => {
                    let lo = tape.scalar_const(-UNBOUNDED_CLIP)?;
                    let hi = tape.scalar_const(UNBOUNDED_CLIP)?;
                    let m = tape.max(ch, lo)?;
                    tape.min(m, hi)?
                }
                ChannelKind::Positive => {
                    let sp = tape.softplus(ch)?;
                    tape.add_const(sp, POSITIVE_FLOOR)?
                }
                ChannelKind::Box { lo, hi } => {
                    let s = tape.sigmoid(ch)?;
                    let scaled = tape.scale(s, hi - lo)?;
                    tape.add_const(scaled, lo)?
                }
            };
            cols.push(out);
        }
        if cols.len() == 1 {
            Ok(cols[0])
        } else {
            tape.concat_cols(&cols)
        }
    }

    /// Convenience inference: builds a throwaway tape and returns the head
    /// output as a plain tensor.
    pub fn predict(&self, xs: &[Tensor], use_attention: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape)?;
        let ids = xs
            .iter()
            .map(|x| tape.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let fwd = self.forward(&mut tape, &nodes, &ids, use_attention)?;
        Ok(tape.value(fwd.theta).clone())
    }
}

/// Location attention over hidden states: `e_t = v' tanh(W y_t + U y_T)`,
/// weights `softmax(e)`, context `sum_t alpha_t y_t`.
///
/// Returns `(context S x n, weights S x T)`.
pub fn attention_context(
    tape: &mut Tape,
    states: &[NodeId],
    att_w: NodeId,
    att_u: NodeId,
    att_v: NodeId,
) -> Result<(NodeId, NodeId)> {
    let last = *states.last().ok_or(Error::Shape {
        op: "attention",
        detail: "no states".into(),
    })?;
    let anchor = tape.matmul(last, att_u)?;
    let mut scores = Vec::with_capacity(states.len());
    for &y in states {
        let wy = tape.matmul(y, att_w)?;
        let pre = tape.add(wy, anchor)?;
        let t = tape.tanh(pre)?;
        scores.push(tape.matmul(t, att_v)?);
    }
    let e = if scores.len() == 1 {
        scores[0]
    } else {
        tape.concat_cols(&scores)?
    };
    let alpha = tape.softmax_rows(e)?;
    let mut context: Option<NodeId> = None;
    for (t, &y) in states.iter().enumerate() {
        let a_t = tape.slice_cols(alpha, t, t + 1)?;
        let w = tape.mul(a_t, y)?;
        context = Some(match context {
            Some(c) => tape.add(c, w)?,
            None => w,
        });
    }
    Ok((context.expect("nonempty"), alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window(batch: usize, d_in: usize, t_len: usize, scale: f64) -> Vec<Tensor> {
        (0..t_len)
            .map(|t| {
                Tensor::matrix(
                    batch,
                    d_in,
                    (0..batch * d_in)
                        .map(|i| ((i + t * 31) as f64 * 0.7).sin() * scale)
                        .collect(),
                )
                .unwrap()
            })
            .collect()
    }

    fn run_forward(params: &AgruParams, xs: &[Tensor], attention: bool) -> (Tape, AgruForward) {
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape).unwrap();
        let ids: Vec<_> = xs
            .iter()
            .map(|x| tape.constant(x.clone()).unwrap())
            .collect();
        let fwd = params.forward(&mut tape, &nodes, &ids, attention).unwrap();
        (tape, fwd)
    }

    #[test]
    fn parameter_count_example() {
        let p = AgruParams::init(2, 4, HeadSpec::market(), 1).unwrap();
        assert_eq!(p.param_count(), 130);
        // 3 gate groups + attention + head
        let n = 6;
        let p = AgruParams::init(4, n, HeadSpec::stock(), 1).unwrap();
        let expect = 3 * (n * 4 + n * n + n) + (2 * n * n + n) + (n * 3 + 3);
        assert_eq!(p.param_count(), expect);
    }

    #[test]
    fn zero_weights_give_zero_hidden_states() {
        let mut p = AgruParams::init(2, 4, HeadSpec::market(), 3).unwrap();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let xs = window(3, 2, 5, 1.0);
        let (tape, fwd) = run_forward(&p, &xs, true);
        for &s in &fwd.states {
            assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        }
        // positive channel at zero pre-activation: softplus(0) + floor
        let theta = tape.value(fwd.theta);
        for i in 0..3 {
            assert_eq!(theta.at(i, 0), 0.0);
            assert!((theta.at(i, 1) - (2.0_f64.ln() + POSITIVE_FLOOR)).abs() < 1e-15);
        }
    }

    #[test]
    fn hidden_states_stay_in_unit_interval() {
        let p = AgruParams::init(2, 4, HeadSpec::market(), 9).unwrap();
        let xs = window(8, 2, 30, 3.0);
        let (tape, fwd) = run_forward(&p, &xs, true);
        for &s in &fwd.states {
            assert!(tape.value(s).data().iter().all(|&v| v.abs() < 1.0));
        }
    }

    #[test]
    fn attention_uniform_for_identical_states() {
        let mut tape = Tape::new();
        let y = Tensor::matrix(2, 3, vec![0.4, -0.2, 0.7, 0.1, 0.9, -0.5]).unwrap();
        let states: Vec<_> = (0..6)
            .map(|_| tape.constant(y.clone()).unwrap())
            .collect();
        let w = tape
            .constant(Tensor::matrix(3, 3, (0..9).map(|i| 0.1 * i as f64).collect()).unwrap())
            .unwrap();
        let u = tape
            .constant(Tensor::matrix(3, 3, (0..9).map(|i| 0.05 * i as f64).collect()).unwrap())
            .unwrap();
        let v = tape
            .constant(Tensor::matrix(3, 1, vec![0.3, -0.8, 0.2]).unwrap())
            .unwrap();
        let (ctx, alpha) = attention_context(&mut tape, &states, w, u, v).unwrap();
        let a = tape.value(alpha);
        for i in 0..2 {
            for t in 0..6 {
                assert!((a.at(i, t) - 1.0 / 6.0).abs() < 1e-12);
            }
        }
        // context equals the (shared) state
        let c = tape.value(ctx);
        for (cv, yv) in c.data().iter().zip(y.data()) {
            assert!((cv - yv).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_uniform_for_zero_scorer() {
        // v_a = 0 makes every score zero regardless of the states.
        let mut tape = Tape::new();
        let states: Vec<_> = (0..4)
            .map(|t| {
                tape.constant(
                    Tensor::matrix(2, 3, (0..6).map(|i| (i + t) as f64 * 0.3).collect()).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let w = tape
            .constant(Tensor::matrix(3, 3, vec![0.2; 9]).unwrap())
            .unwrap();
        let u = tape
            .constant(Tensor::matrix(3, 3, vec![-0.1; 9]).unwrap())
            .unwrap();
        let v = tape.constant(Tensor::matrix(3, 1, vec![0.0; 3]).unwrap()).unwrap();
        let (_, alpha) = attention_context(&mut tape, &states, w, u, v).unwrap();
        let a = tape.value(alpha);
        for i in 0..2 {
            for t in 0..4 {
                assert!((a.at(i, t) - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_step_window_gets_unit_attention() {
        let p = AgruParams::init(2, 4, HeadSpec::market(), 5).unwrap();
        let xs = window(3, 2, 1, 1.0);
        let (tape, fwd) = run_forward(&p, &xs, true);
        let a = tape.value(fwd.attention.unwrap());
        assert_eq!(a.dims2(), (3, 1));
        assert!(a.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let p = AgruParams::init(2, 4, HeadSpec::market(), 11).unwrap();
        let xs = window(16, 2, 12, 2.0);
        let (tape, fwd) = run_forward(&p, &xs, true);
        let a = tape.value(fwd.attention.unwrap());
        for i in 0..16 {
            let s: f64 = (0..12).map(|t| a.at(i, t)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ablation_shares_the_recurrence() {
        let p = AgruParams::init(2, 4, HeadSpec::market(), 17).unwrap();
        let xs = window(5, 2, 8, 1.5);
        let (tape_a, fwd_a) = run_forward(&p, &xs, true);
        let (tape_b, fwd_b) = run_forward(&p, &xs, false);
        assert!(fwd_b.attention.is_none());
        for (&sa, &sb) in fwd_a.states.iter().zip(&fwd_b.states) {
            assert_eq!(tape_a.value(sa), tape_b.value(sb));
        }
        assert_eq!(
            tape_b.value(fwd_b.context),
            tape_b.value(*fwd_b.states.last().unwrap())
        );
    }

    #[test]
    fn head_transforms_respect_bounds() {
        let mut p = AgruParams::init(2, 4, HeadSpec::market(), 21).unwrap();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        // saturated pre-activations via the bias
        p.b_out = Tensor::matrix(1, 2, vec![7.0, -50.0]).unwrap();
        let xs = window(2, 2, 3, 1.0);
        let theta = p.predict(&xs, true).unwrap();
        for i in 0..2 {
            assert_eq!(theta.at(i, 0), UNBOUNDED_CLIP);
            assert!((theta.at(i, 1) - POSITIVE_FLOOR).abs() < 1e-12);
        }
        p.b_out = Tensor::matrix(1, 2, vec![-7.0, 0.0]).unwrap();
        let theta = p.predict(&xs, true).unwrap();
        assert_eq!(theta.at(0, 0), -UNBOUNDED_CLIP);

        let box_head = HeadSpec {
            channels: vec![ChannelKind::Box { lo: 1.0, hi: 3.0 }],
        };
        let mut pb = AgruParams::init(2, 4, box_head, 21).unwrap();
        for t in pb.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let theta = pb.predict(&xs, true).unwrap();
        assert!((theta.at(0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = AgruParams::init(4, 6, HeadSpec::stock(), 42).unwrap();
        let b = AgruParams::init(4, 6, HeadSpec::stock(), 42).unwrap();
        assert_eq!(a, b);
        let c = AgruParams::init(4, 6, HeadSpec::stock(), 43).unwrap();
        assert_ne!(a, c);
        let bound = 1.0 / (6.0_f64).sqrt();
        for (_, t) in a.tensors() {
            assert!(t.data().iter().all(|&v| v.abs() <= bound));
        }
        assert!(a.b_z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn snapshot_round_trip_restores_network() {
        let p = AgruParams::init(2, 5, HeadSpec::market(), 33).unwrap();
        let bytes = crate::autodiff::to_bytes(&p.to_entries());
        let entries = crate::autodiff::from_bytes(&bytes).unwrap();
        let mut q = AgruParams::init(2, 5, HeadSpec::market(), 99).unwrap();
        q.load_entries(&entries).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let p = AgruParams::init(2, 3, HeadSpec::market(), 7).unwrap();
        let xs = window(4, 2, 5, 1.0);

        let loss_of = |p: &AgruParams| -> f64 {
            let mut tape = Tape::new();
            let nodes = p.register(&mut tape).unwrap();
            let ids: Vec<_> = xs
                .iter()
                .map(|x| tape.constant(x.clone()).unwrap())
                .collect();
            let fwd = p.forward(&mut tape, &nodes, &ids, true).unwrap();
            let sq = tape.mul(fwd.theta, fwd.theta).unwrap();
            let s = tape.sum(sq).unwrap();
            tape.value(s).item()
        };

        let mut tape = Tape::new();
        let nodes = p.register(&mut tape).unwrap();
        let ids: Vec<_> = xs
            .iter()
            .map(|x| tape.constant(x.clone()).unwrap())
            .collect();
        let fwd = p.forward(&mut tape, &nodes, &ids, true).unwrap();
        let sq = tape.mul(fwd.theta, fwd.theta).unwrap();
        let root = tape.sum(sq).unwrap();
        let grads = tape.backward(root).unwrap();

        let h = 1e-5;
        for (slot, (name, tensor)) in p.tensors().iter().enumerate() {
            for e in 0..tensor.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[slot].data_mut()[e] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[slot].data_mut()[e] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let ad = grads
                    .wrt(nodes.ids[slot])
                    .map(|g| g.data()[e])
                    .unwrap_or(0.0);
                assert!(
                    (ad - fd).abs() <= 1e-3 * fd.abs().max(1.0),
                    "{name}[{e}]: ad={ad} fd={fd}"
                );
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn forward_shapes_and_bounds(
            seed in 0u64..1000,
            hidden in 3usize..8,
            t_len in 1usize..12,
            batch in 1usize..6,
        ) {
            let p = AgruParams::init(2, hidden, HeadSpec::market(), seed).unwrap();
            let xs = window(batch, 2, t_len, 2.0);
            let (tape, fwd) = run_forward(&p, &xs, true);
            let theta = tape.value(fwd.theta);
            prop_assert_eq!(theta.dims2(), (batch, 2));
            for i in 0..batch {
                prop_assert!(theta.at(i, 0).abs() <= UNBOUNDED_CLIP);
                prop_assert!(theta.at(i, 1) >= POSITIVE_FLOOR);
            }
            for &s in &fwd.states {
                prop_assert!(tape.value(s).data().iter().all(|&v| v.abs() < 1.0));
            }
        }
    }
}
