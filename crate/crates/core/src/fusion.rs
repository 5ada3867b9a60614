//! Attention fusion of paired representations and the hierarchical item
//! content representation built from it.

use crate::autodiff::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Parameters of one attention block, held in a [`ParamStore`]:
/// query `q` (`d×1`), weight `w` (`d×d`, applied as `e·w`) and bias `b`
/// (`1×d`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub q: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

/// An attention block's parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: Var,
    pub w: Var,
    pub b: Var,
}

impl AttentionParams {
    pub fn record<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> AttentionVars {
        AttentionVars {
            q: tape.param(store, self.q),
            w: tape.param(store, self.w),
            b: tape.param(store, self.b),
        }
    }
}

/// Fuses two row-aligned `n×d` inputs:
/// `s_m = qᵀ tanh(e_m·w + b)`, `α = softmax(s)`, output `Σ_m α_m e_m`.
///
/// Returns the fused rows and the `n×2` weight matrix.
pub fn attend<T: Float>(tape: &mut Tape<T>, block: &AttentionVars, inputs: [Var; 2]) -> Result<(Var, Var)> {
    let [a, b] = inputs;
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(
            "attend",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    let d = tape.shape(a)[1];
    if tape.shape(block.w) != [d, d] {
        return Err(Error::dim(
            "attend",
            format!("inputs of width {d} for a block of {:?}", tape.shape(block.w)),
        ));
    }
    let score = |tape: &mut Tape<T>, e: Var| -> Result<Var> {
        let h = tape.matmul(e, block.w)?;
        let h = tape.add_bias(h, block.b)?;
        let h = tape.tanh(h)?;
        tape.matmul(h, block.q)
    };
    let sa = score(tape, a)?;
    let sb = score(tape, b)?;
    let scores = tape.hcat(&[sa, sb])?;
    let weights = tape.row_softmax(scores)?;
    let wa = tape.cols(weights, 0, 1)?;
    let wb = tape.cols(weights, 1, 1)?;
    let ea = tape.row_scale(a, wa)?;
    let eb = tape.row_scale(b, wb)?;
    let fused = tape.add(ea, eb)?;
    Ok((fused, weights))
}

/// Standalone attention block for use outside a model.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock<T> {
    pub q: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Float> AttentionBlock<T> {
    pub fn new(q: Vec<T>, w: Tensor<T>, b: Vec<T>) -> Result<Self> {
        let d = q.len();
        if w.shape() != [d, d] || b.len() != d {
            return Err(Error::dim(
                "attention block",
                format!("q:{d} w:{:?} b:{}", w.shape(), b.len()),
            ));
        }
        Ok(AttentionBlock {
            q: Tensor::column_vector(q),
            w,
            b: Tensor::row_vector(b),
        })
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    /// Fuses two matrices of the same shape; returns fused rows and `n×2`
    /// weights.
    pub fn attend(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let vars = AttentionVars {
            q: tape.constant(self.q.clone()),
            w: tape.constant(self.w.clone()),
            b: tape.constant(self.b.clone()),
        };
        let (ea, eb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let (fused, weights) = attend(&mut tape, &vars, [ea, eb])?;
        Ok((tape.value(fused).clone(), tape.value(weights).clone()))
    }
}

/// Per-modality inputs to content fusion: projected salient rows and,
/// when ID enhancement is on, the matching modal ID rows.
#[derive(Clone, Copy, Debug)]
pub struct ModalInput {
    pub salient: Var,
    pub id: Option<Var>,
}

/// Intermediate and final content representations for a set of items.
#[derive(Clone, Debug, Default)]
pub struct ContentState {
    pub text: Option<ModalBranch>,
    pub visual: Option<ModalBranch>,
    /// `e^c`.
    pub content: Option<Var>,
    /// Weights of every attention block that ran, in order text, visual, vt.
    pub weights: Vec<Var>,
}

/// One modality's branch: salient `e^m`, ID `e^{mid}` and enhanced `e^{m'}`.
#[derive(Clone, Copy, Debug)]
pub struct ModalBranch {
    pub salient: Var,
    pub id: Option<Var>,
    pub enhanced: Var,
}

/// Attention blocks used by the content path.
#[derive(Clone, Copy, Debug)]
pub struct ContentBlocks {
    pub text: AttentionVars,
    pub visual: AttentionVars,
    pub cross: AttentionVars,
}

/// Hierarchical fusion: each available modality is enhanced by its ID rows
/// (when given), then the two enhanced branches are fused by the cross
/// block. A single available modality passes straight through.
pub fn content_representation<T: Float>(
    tape: &mut Tape<T>,
    blocks: &ContentBlocks,
    text: Option<ModalInput>,
    visual: Option<ModalInput>,
) -> Result<ContentState> {
    let mut weights = Vec::new();
    let mut branch =
        |tape: &mut Tape<T>, input: Option<ModalInput>, block: &AttentionVars| -> Result<Option<ModalBranch>> {
            let Some(input) = input else { return Ok(None) };
            let enhanced = match input.id {
                Some(id) => {
                    let (fused, w) = attend(tape, block, [input.salient, id])?;
                    weights.push(w);
                    fused
                }
                None => input.salient,
            };
            Ok(Some(ModalBranch {
                salient: input.salient,
                id: input.id,
                enhanced,
            }))
        };
    let text = branch(tape, text, &blocks.text)?;
    let visual = branch(tape, visual, &blocks.visual)?;
    let content = match (&text, &visual) {
        (Some(t), Some(v)) => {
            let (fused, w) = attend(tape, &blocks.cross, [t.enhanced, v.enhanced])?;
            weights.push(w);
            fused
        }
        (Some(only), None) | (None, Some(only)) => only.enhanced,
        (None, None) => return Err(Error::Config("content fusion needs at least one modality".into())),
    };
    Ok(ContentState {
        text,
        visual,
        content: Some(content),
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(d: usize, seed: f64) -> AttentionBlock<f64> {
        let q = (0..d).map(|k| ((k as f64 + seed) * 0.7).sin()).collect();
        let w = Tensor::from_fn(d, d, |r, c| ((r * d + c) as f64 * 0.31 + seed).cos() * 0.5);
        let b = (0..d).map(|k| (k as f64 * 1.3 - seed).sin() * 0.2).collect();
        AttentionBlock::new(q, w, b).unwrap()
    }

    #[test]
    fn identical_inputs_fuse_to_themselves_with_equal_weights() {
        let blk = block(3, 0.4);
        let e = Tensor::row_vector(vec![0.2, -0.5, 1.1]);
        let (out, w) = blk.attend(&e, &e).unwrap();
        assert_eq!(w.data(), &[0.5, 0.5]);
        for (o, x) in out.data().iter().zip(e.data()) {
            assert!((o - x).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_query_averages_inputs() {
        let mut blk = block(2, 1.0);
        blk.q = Tensor::zeros(2, 1);
        let a = Tensor::row_vector(vec![1.0, 3.0]);
        let b = Tensor::row_vector(vec![-1.0, 5.0]);
        let (out, w) = blk.attend(&a, &b).unwrap();
        assert_eq!(w.data(), &[0.5, 0.5]);
        assert_eq!(out.data(), &[0.0, 4.0]);
    }

    #[test]
    fn width_mismatch_rejected() {
        let blk = block(3, 0.0);
        let a = Tensor::row_vector(vec![1.0, 2.0]);
        assert!(matches!(blk.attend(&a, &a), Err(Error::Dimension { .. })));
        let c = Tensor::row_vector(vec![1.0, 2.0, 3.0]);
        assert!(blk.attend(&a, &c).is_err());
    }

    #[test]
    fn no_modalities_is_a_config_error() {
        let mut tape = Tape::<f64>::new();
        let blk = block(2, 0.0);
        let vars = AttentionVars {
            q: tape.constant(blk.q.clone()),
            w: tape.constant(blk.w.clone()),
            b: tape.constant(blk.b.clone()),
        };
        let blocks = ContentBlocks {
            text: vars,
            visual: vars,
            cross: vars,
        };
        assert!(matches!(
            content_representation(&mut tape, &blocks, None, None),
            Err(Error::Config(_))
        ));
    }
}
