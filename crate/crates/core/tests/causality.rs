mod common;

use proptest::prelude::*;

use common::random_tokens;
use ssa_core::attention::{AttnConfig, AttnMode};
use ssa_core::model::{Model, ModelConfig};

fn model() -> Model<f32> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        n_kv_heads: 2,
        head_dim: 8,
        attn: AttnConfig::new(4, 2, AttnMode::Sparse, true).unwrap(),
        ..ModelConfig::default()
    };
    let mut m = Model::<f32>::new(cfg, 21).unwrap();
    for p in m.params.iter_mut() {
        if p.value.shape().len() == 2 {
            p.value.data_mut().iter_mut().for_each(|x| *x *= 10.0);
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn suffix_edits_leave_prefix_logits_bit_identical(
        len in 2usize..48, cut in 0usize..47, seed: u64, fill in proptest::collection::vec(0u32..259, 48),
    ) {
        let m = model();
        let cut = cut % (len - 1);
        let toks = random_tokens(len, 259, seed);
        let mut edited = toks.clone();
        edited[cut + 1..].copy_from_slice(&fill[..len - cut - 1]);
        for mode in [AttnMode::Full, AttnMode::Sparse] {
            let a = m.forward_inference(&toks, mode, None).unwrap();
            let b = m.forward_inference(&edited, mode, None).unwrap();
            let w = a.cols();
            prop_assert_eq!(&a.data()[..(cut + 1) * w], &b.data()[..(cut + 1) * w]);
        }
    }
}
