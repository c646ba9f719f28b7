//! Mean, max and zero-padding fusers next to the fusion block, including
//! the case where a missing modality is indistinguishable from a zero one.
//!
//! `cargo run --example baselines`

use nfuse::baselines::{max_fusion, mean_fusion, zero_pad_conv_fusion, ConvFusionParams};
use nfuse::fusion::{tfusion_forward, ModalitySet};
use nfuse::harness::rng;
use nfuse::transformer::{EncoderStack, StackConfig};
use nfuse::{Result, Tape, Tensor};
use rand::Rng;

fn main() -> Result<()> {
    let mut r = rng::stream(1, "example");
    let shape = [1, 4, 5];
    let mut draw = || Tensor::<f32>::new(&shape, (0..20).map(|_| r.random_range(-2.0..2.0)).collect());
    let (f1, f2) = (draw()?, draw()?);
    let absent = ModalitySet::new(3, [(1, f1.clone()), (2, f2.clone())])?;
    let zero = ModalitySet::new(3, [(1, f1), (2, f2), (3, Tensor::zeros(&shape))])?;

    let mut r = rng::stream(1, "params");
    let conv = ConvFusionParams::<f32>::init(&mut r, 3, 4, 1)?;
    let stack = EncoderStack::<f32>::init(
        &mut r,
        &StackConfig { channels: 4, depth: 2, num_heads: 2, ..StackConfig::default() },
    )?;
    let tape = Tape::new();

    for (name, set) in [("{1,2}", &absent), ("{1,2} + zero f3", &zero)] {
        println!("{name}");
        println!("  mean     {:?}", &mean_fusion(&tape, set)?.data()[..5]);
        println!("  max      {:?}", &max_fusion(&tape, set)?.data()[..5]);
        println!("  conv_pad {:?}", &zero_pad_conv_fusion(&tape, set, &conv)?.data()[..5]);
        println!("  tfusion  {:?}", &tfusion_forward(&tape, set, &stack)?.data()[..5]);
    }
    let gap = |a: Tensor<f32>, b: Tensor<f32>| a.max_abs_diff(&b);
    println!(
        "absent vs zero-present: conv_pad differs by {:.3e}, tfusion by {:.3e}",
        gap(zero_pad_conv_fusion(&tape, &absent, &conv)?, zero_pad_conv_fusion(&tape, &zero, &conv)?)?,
        gap(tfusion_forward(&tape, &absent, &stack)?, tfusion_forward(&tape, &zero, &stack)?)?
    );
    Ok(())
}
