//! The fusion block on arbitrary modality subsets: tokens, weight maps and
//! the fused representation.
//!
//! `cargo run --example fusion_block`

use nfuse::fusion::{correlation_extraction, fuse, modal_attention, tokenize, BlockConfig, ModalitySet, TFusionBlock};
use nfuse::harness::masks::all_subsets;
use nfuse::harness::rng;
use nfuse::{Result, Tape, Tensor};
use rand::Rng;

const TOTAL: usize = 4;

fn main() -> Result<()> {
    let cfg = BlockConfig { channels: 8, depth: 2, num_heads: 2, ..BlockConfig::default() };
    let mut r = rng::stream(0, "example");
    let block = TFusionBlock::<f32>::init(&mut r, &cfg, TOTAL)?;
    let shape = [1, 8, 3, 3];
    let inputs: Vec<Tensor<f32>> = (0..TOTAL)
        .map(|_| Tensor::new(&shape, (0..72).map(|_| r.random_range(-1.0..1.0)).collect()))
        .collect::<Result<_>>()?;

    for subset in all_subsets(TOTAL) {
        let set = ModalitySet::new(TOTAL, subset.ids().into_iter().map(|k| (k, inputs[k - 1].clone())))?;
        let tape = Tape::new();
        let tokens = tokenize(&tape, &set)?;
        let weights = modal_attention(&tape, &correlation_extraction(&tape, &tokens, block.stack.as_ref().unwrap())?)?;
        let fused = fuse(&tape, &set, &weights)?;
        assert!(fused.bit_eq(&block.forward(&tape, &set)?));
        let first_voxel: Vec<String> = weights.0.iter().map(|(k, m)| format!("m{k}={:.3}", m.data()[0])).collect();
        println!(
            "{:<10} tokens {:?} fused {:?}  voxel 0: {}",
            subset.to_string(),
            tokens.values.shape(),
            fused.shape(),
            first_voxel.join(" ")
        );
    }
    Ok(())
}
