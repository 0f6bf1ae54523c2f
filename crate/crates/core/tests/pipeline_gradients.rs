use kdnli::data::gen_synthetic_nli;
use kdnli::encoder::{Encoder, EncoderConfig, Vocabulary};
use kdnli::head::NliModel;
use kdnli::train::check_gradients;

fn tiny_model(seed: u64, texts: &[&str]) -> NliModel {
    let vocab = Vocabulary::from_texts(texts.iter().copied());
    let config = EncoderConfig {
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 16,
        ..Default::default()
    };
    NliModel::with_desk_head(Encoder::new(config, vocab, seed).unwrap(), seed + 100).unwrap()
}

#[test]
fn full_pipeline_matches_central_differences() {
    for seed in 0..20u64 {
        let ex = gen_synthetic_nli(seed, 3, 18).unwrap().remove(0);
        let model = tiny_model(seed, &[&ex.premise, &ex.hypothesis]);
        let check = check_gradients(&model, &ex, 1e-5, 1e-6).unwrap();
        assert!(check.max_relative_error < 1e-4, "seed {seed}: {check:?}");
    }
}
