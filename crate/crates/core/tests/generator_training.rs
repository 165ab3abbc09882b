use std::time::Instant;

use fairflow::fixtures;
use fairflow::generator::{
    train_generator, GeneratorArchitecture, GeneratorModel, GeneratorTrainConfig, Vocabulary,
};

fn exact_match(model: &GeneratorModel, pairs: &[(String, String)]) -> f64 {
    let srcs: Vec<String> = pairs.iter().map(|(s, _)| s.clone()).collect();
    let outs = model.generate_all(&srcs);
    let hits = outs.iter().zip(pairs).filter(|(o, (_, t))| *o == t).count();
    hits as f64 / pairs.len() as f64
}

#[test]
fn untrained_loss_is_near_uniform() {
    // 46 words plus the four specials
    let words: Vec<String> = (0..46).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::build(words.iter().map(String::as_str));
    assert_eq!(vocab.len(), 50);
    let model = GeneratorModel::new(GeneratorArchitecture::default(), vocab, 1).unwrap();
    let loss = model.teacher_forcing_loss("w1 w2 w3", "w4 w5 w6 w7").unwrap();
    // four target tokens plus the end marker
    let per_token = loss / 5.0;
    let uniform = 50f64.ln();
    assert!((per_token - uniform).abs() / uniform < 0.2, "{per_token} vs {uniform}");
}

#[test]
fn teacher_forcing_gradient_matches_finite_differences() {
    let arch = GeneratorArchitecture { d_model: 8, heads: 2, ffn: 16, encoder_layers: 2, decoder_layers: 2, max_len: 12 };
    let vocab = Vocabulary::build(["she taught herself art .", "he lost his keys"]);
    let mut model = GeneratorModel::new(arch, vocab, 4).unwrap();
    let (src, tgt) = ("she taught herself art", "he taught himself art .");
    let (_, grads) = model.loss_gradients(src, tgt).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let shape = model.params().get(id).raw_dim();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| ndarray::Array2::zeros(shape));
        for idx in ndarray::indices(shape) {
            let (r, c) = idx;
            let orig = model.params().get(id)[[r, c]];
            model.params_mut().get_mut(id)[[r, c]] = orig + h;
            let up = model.teacher_forcing_loss(src, tgt).unwrap();
            model.params_mut().get_mut(id)[[r, c]] = orig - h;
            let down = model.teacher_forcing_loss(src, tgt).unwrap();
            model.params_mut().get_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[[r, c]];
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-6 {
                worst = worst.max((a - numeric).abs() / scale);
            } else {
                assert!((a - numeric).abs() < 1e-8, "{} [{r},{c}]: {a} vs {numeric}", model.params().name(id));
            }
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn memorises_template_pairs() {
    let start = Instant::now();
    let pairs = fixtures::template_pairs(200, 7);
    let cfg = GeneratorTrainConfig { epochs: 60, ..Default::default() };
    let model = train_generator(&pairs, &cfg).unwrap();
    let h = &model.meta.loss_history;
    assert!(h[4] < h[0], "{h:?}");
    let em = exact_match(&model, &pairs);
    eprintln!("exact match {em}, {} epochs, {:?}", h.len(), start.elapsed());
    assert!(em >= 0.9, "{em}");
    assert!(start.elapsed().as_secs() < 600);
}

#[test]
fn learns_to_copy() {
    let pairs: Vec<(String, String)> =
        fixtures::template_pairs(150, 8).into_iter().map(|(s, _)| (s.clone(), s)).collect();
    let model = train_generator(&pairs, &GeneratorTrainConfig { epochs: 60, seed: 1, ..Default::default() }).unwrap();
    let em = exact_match(&model, &pairs);
    eprintln!("copy exact match {em}");
    assert!(em >= 0.95, "{em}");
}

#[test]
fn single_pair_is_memorised() {
    let pairs = vec![("Anna taught herself chess.".to_string(), "John taught himself chess.".to_string())];
    let cfg = GeneratorTrainConfig { epochs: 1000, stop_below: 1e-4, ..Default::default() };
    let model = train_generator(&pairs, &cfg).unwrap();
    let loss = model.teacher_forcing_loss(&pairs[0].0, &pairs[0].1).unwrap();
    assert!(loss < 0.01, "{loss}");
    assert_eq!(model.generate_text(&pairs[0].0), pairs[0].1);
    // the empty input still decodes to something finite
    assert!(model.generate_ids("").len() <= model.arch.max_len);
}

#[test]
fn greedy_decoding_is_pure() {
    let pairs = fixtures::template_pairs(10, 3);
    let model = train_generator(&pairs, &GeneratorTrainConfig { epochs: 3, ..Default::default() }).unwrap();
    for (s, _) in &pairs {
        assert_eq!(model.generate_text(s), model.generate_text(s));
    }
    let dist = model.next_token_distribution(&pairs[0].0, &[]);
    assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-5);
}
