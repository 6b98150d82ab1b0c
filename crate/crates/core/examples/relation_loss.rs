//! Evaluate the relation-head loss on hand-made predictions.
//!
//! cargo run --example relation_loss

use spatial_reasoning::aggregation::{PairKind, PairRow};
use spatial_reasoning::model::pair_loss;
use spatial_reasoning::nn::Tensor;

fn main() -> spatial_reasoning::Result<()> {
    let patch = PairRow { left: 0, right: 1, class_target: 1.0, distance_target: (-0.2, 0.5), kind: PairKind::Patch };
    let neg = PairRow { left: 0, right: 2, class_target: 0.0, distance_target: (1.0, 1.0), kind: PairKind::ImageNeg };

    // Zero logits: p = 0.5 everywhere, zero distance predictions.
    let raw = Tensor::<f64>::zeros(&[1, 3]);
    let (loss, _) = pair_loss(&raw, &[patch])?;
    println!("patch pair, zero output: {loss:?}");

    let raw = Tensor::from_vec(&[2, 3], vec![4.0, -0.2, 0.5, -4.0, 1.0, 1.0]);
    let (loss, grad) = pair_loss(&raw, &[patch, neg])?;
    println!("confident and correct:   {loss:?}");
    println!("gradient: {:?}", grad.data());
    Ok(())
}
